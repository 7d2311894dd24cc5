mod common;

use common::rand_tensor;
use ewasr::losses::*;
use ewasr::params::{init_rng, ParamBuilder, ParamKind, ParamStore};
use ewasr::{Shape, Tensor};
use proptest::prelude::*;

/// Random class probabilities, normalised per pixel and bounded away from 0.
fn probs(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut t = rand_tensor(Shape::new(n, 3, h, w), seed, 0.1, 1.0);
    let hw = h * w;
    for s in 0..n {
        for p in 0..hw {
            let idx = |c: usize| (s * 3 + c) * hw + p;
            let z: f64 = (0..3).map(|c| t.data()[idx(c)]).sum();
            for c in 0..3 {
                t.data_mut()[idx(c)] /= z;
            }
        }
    }
    t
}

fn central_difference(t: &Tensor, i: usize, f: impl Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-6;
    let mut p = t.clone();
    p.data_mut()[i] += h;
    let mut m = t.clone();
    m.data_mut()[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let p = probs(2, 2, 3, 1);
    let labels = vec![0, 1, 2, IGNORE, 1, 0, 2, 2, 1, 0, IGNORE, 1];
    for gamma in [0.0, 0.5, 2.0] {
        let cfg = LossConfig {
            focal_gamma: gamma,
            focal_alpha: 0.75,
            ..LossConfig::default()
        };
        let l = focal_loss(&p, &labels, &cfg).unwrap();
        for i in 0..p.len() {
            let n = central_difference(&p, i, |q| focal_loss(q, &labels, &cfg).unwrap().value);
            assert!(rel(l.grad.data()[i], n) <= 1e-4, "gamma {gamma} index {i}");
        }
    }
}

#[test]
fn separation_gradient_matches_finite_differences() {
    let f = rand_tensor(Shape::new(2, 3, 2, 3), 5, -1.0, 1.0);
    // Image labels at twice the feature resolution.
    let mut labels = vec![WATER; 2 * 4 * 6];
    for &i in &[0usize, 2, 14, 24 + 6, 24 + 20] {
        labels[i] = OBSTACLE;
    }
    labels[4] = SKY;
    let l = separation_loss(&f, &labels, (4, 6)).unwrap();
    assert!(!l.empty);
    for i in 0..f.len() {
        let n = central_difference(&f, i, |q| separation_loss(q, &labels, (4, 6)).unwrap().value);
        assert!(rel(l.grad.data()[i], n) <= 1e-4, "index {i}: {} vs {n}", l.grad.data()[i]);
    }
}

#[test]
fn separation_toy_oracle() {
    // Two channels over four pixels; pixels 0-2 water, pixel 3 obstacle.
    let f = Tensor::from_vec(Shape::new(1, 2, 1, 4), vec![1.0, 3.0, 2.0, 10.0, 0.0, 0.0, 3.0, 4.0]).unwrap();
    let labels = [WATER, WATER, WATER, OBSTACLE];
    // mu = (2, 1); per-channel variances 2/3 and 2; d2 = 8^2 + 3^2.
    let var = (2.0 / 3.0 + 2.0) / 2.0;
    let d2 = 73.0;
    let expect = var / (var + d2 + SEPARATION_EPS);
    let l = separation_loss(&f, &labels, (1, 4)).unwrap();
    assert!((l.value - expect).abs() < 1e-15);
}

#[test]
fn separation_limits() {
    let tight = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.5, 0.5, 0.5, 9.0]).unwrap();
    let labels = [WATER, WATER, WATER, OBSTACLE];
    assert_eq!(separation_loss(&tight, &labels, (1, 4)).unwrap().value, 0.0);

    let overlap = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 2.0, 1.0, 1.0]).unwrap();
    let labels = [WATER, WATER, SKY, OBSTACLE];
    let v = separation_loss(&overlap, &labels, (1, 4)).unwrap().value;
    assert!((v - 1.0 / (1.0 + SEPARATION_EPS)).abs() < 1e-12);

    let no_obstacle = separation_loss(&overlap, &[WATER, WATER, SKY, SKY], (1, 4)).unwrap();
    assert!(no_obstacle.empty);
    assert_eq!(no_obstacle.value, 0.0);
}

#[test]
fn focal_of_certain_predictions_is_zero() {
    let mut p = Tensor::zeros(Shape::new(1, 3, 1, 3));
    for (px, c) in [(0, 0), (1, 1), (2, 2)] {
        p.data_mut()[c * 3 + px] = 1.0;
    }
    assert_eq!(focal_loss(&p, &[0, 1, 2], &LossConfig::default()).unwrap().value, 0.0);
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut ps = ParamStore::new();
    let mut rng = init_rng(0);
    let id = ParamBuilder::new(&mut ps, &mut rng).constant("w", Shape::new(1, values.len(), 1, 1), ParamKind::Weight, 0.0);
    ps.set_values(id, values).unwrap();
    ps
}

#[test]
fn total_loss_composition() {
    let p = probs(1, 2, 2, 3);
    let f = rand_tensor(Shape::new(1, 2, 2, 2), 4, -1.0, 1.0);
    let labels = [WATER, OBSTACLE, WATER, SKY];
    let ps = store_with(&[1.0, -2.0]);
    let cfg = LossConfig::default();
    let focal = focal_loss(&p, &labels, &cfg).unwrap().value;
    let sep = separation_loss(&f, &labels, (2, 2)).unwrap().value;
    let t = total_loss(&p, &f, &labels, &ps, &cfg).unwrap();
    assert!((t.parts.total - (focal + 0.01 * sep + 1e-6 * 5.0)).abs() < 1e-15);

    let no_sep = LossConfig {
        separation_weight: 0.0,
        ..cfg.clone()
    };
    let t = total_loss(&p, &f, &labels, &ps, &no_sep).unwrap();
    assert!((t.parts.total - (focal + 5e-6)).abs() < 1e-15);
    assert_eq!(t.dfeatures.sum_sq(), 0.0);

    let zero = store_with(&[0.0, 0.0]);
    assert_eq!(total_loss(&p, &f, &labels, &zero, &cfg).unwrap().parts.decay, 0.0);
}

#[test]
fn config_validation() {
    let bad = LossConfig {
        focal_gamma: -1.0,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossConfig {
        separation_weight: f64::NAN,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_is_nonnegative(seed in 0u64..10_000, gamma in 0.0f64..5.0, labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 6)) {
        let p = probs(1, 2, 3, seed);
        let cfg = LossConfig { focal_gamma: gamma, ..LossConfig::default() };
        prop_assert!(focal_loss(&p, &labels, &cfg).unwrap().value >= 0.0);
    }

    #[test]
    fn focal_decreases_with_true_class_probability(gamma in 0.0f64..5.0, a in 0.01f64..0.99, b in 0.01f64..0.99) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let cfg = LossConfig { focal_gamma: gamma, ..LossConfig::default() };
        let one = |pt: f64| {
            let t = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![pt, (1.0 - pt) / 2.0, (1.0 - pt) / 2.0]).unwrap();
            focal_loss(&t, &[0], &cfg).unwrap().value
        };
        prop_assert!(one(lo) > one(hi));
    }

    #[test]
    fn ignored_pixels_do_not_change_focal(seed in 0u64..10_000, px in 0usize..6, bump in -0.09f64..0.5) {
        let p = probs(1, 2, 3, seed);
        let mut labels = vec![0u8, 1, 2, 0, 1, 2];
        labels[px] = IGNORE;
        let cfg = LossConfig::default();
        let base = focal_loss(&p, &labels, &cfg).unwrap().value;
        let mut q = p.clone();
        for c in 0..3 {
            q.data_mut()[c * 6 + px] += bump;
        }
        prop_assert_eq!(base.to_bits(), focal_loss(&q, &labels, &cfg).unwrap().value.to_bits());
    }

    #[test]
    fn separation_is_bounded(seed in 0u64..10_000, labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 16)) {
        let f = rand_tensor(Shape::new(1, 3, 4, 4), seed, -2.0, 2.0);
        let v = separation_loss(&f, &labels, (4, 4)).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
