//! Parallel versus sequential execution of the hot paths.
//!
//! Each benchmark runs once with the rayon pool and once with
//! `par::with_parallel(false)`. Without the `parallel` feature both
//! variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ewasr::backbone::BackbonePreset;
use ewasr::data::{batch, synth_scene, SegSample};
use ewasr::eval::{evaluate, EvalConfig};
use ewasr::kernels::{conv2d, conv2d_backward, ConvGeom};
use ewasr::models::{Model, ModelConfig};
use ewasr::params::init_rng;
use ewasr::{par, Shape, Tensor};
use rand::Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = init_rng(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

fn convolution(c: &mut Criterion) {
    let x = random(Shape::new(4, 32, 64, 64), 1);
    let w = random(Shape::new(32, 32, 3, 3), 2);
    let g = ConvGeom::same(3, 1);
    let dy = conv2d(&x, &w, None, &g);
    let mut group = c.benchmark_group("conv3x3_4x32x64x64");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            par::with_parallel(on, || b.iter(|| conv2d(black_box(&x), &w, None, &g)))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            par::with_parallel(on, || b.iter(|| conv2d_backward(black_box(&x), &w, &dy, &g, true)))
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let scenes: Vec<SegSample> = (0..4).map(|i| synth_scene(0, i, 64, 64)).collect();
    let refs: Vec<&SegSample> = scenes.iter().collect();
    let (img, imu, _) = batch(&refs).expect("batch");
    let model = Model::build(&ModelConfig::ewasr(BackbonePreset::Tiny).with_input(64, 64)).expect("model");
    let mut group = c.benchmark_group("ewasr_tiny_forward_4x64x64");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_function(name, |b| {
            par::with_parallel(on, || b.iter(|| model.forward(black_box(&img), &imu).expect("forward")))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let scenes: Vec<SegSample> = (0..64).map(|i| synth_scene(1, i, 96, 128)).collect();
    let frames: Vec<_> = scenes
        .iter()
        .map(|s| (s.id.as_str(), s.labels.as_slice(), s.annotation.as_ref().expect("annotated")))
        .collect();
    let cfg = EvalConfig::default();
    let mut group = c.benchmark_group("evaluate_64_frames");
    for (name, on) in MODES {
        group.bench_function(name, |b| {
            par::with_parallel(on, || b.iter(|| evaluate(black_box(&frames), &cfg).expect("evaluate")))
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, inference, evaluation);
criterion_main!(benches);
