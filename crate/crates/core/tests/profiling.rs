use ewasr::backbone::BackbonePreset;
use ewasr::blocks::Conv2d;
use ewasr::data::{synth_scene, SegSample};
use ewasr::models::{Model, ModelConfig, WASR_BLOCKS};
use ewasr::params::{init_rng, under, ParamBuilder, ParamStore};
use ewasr::profiling::*;
use ewasr::{Graph, Mode, Shape};

fn light_tiny() -> ModelConfig {
    ModelConfig::wasr_light(BackbonePreset::Tiny).with_input(64, 64)
}

fn scenes(n: usize, seed: u64) -> Vec<SegSample> {
    (0..n).map(|i| synth_scene(seed, i, 64, 64)).collect()
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

#[test]
fn pointwise_conv_closed_form() {
    let mut ps = ParamStore::meta();
    let mut rng = init_rng(0);
    let conv = Conv2d::pointwise(&mut ParamBuilder::new(&mut ps, &mut rng), "conv", 4, 2, true);
    let mut g = Graph::meta(Mode::Eval);
    let x = g.input_shape(Shape::new(1, 4, 8, 8));
    conv.forward(&mut g, &ps, x).unwrap();
    assert_eq!(ps.num_trainable(), 4 * 2 + 2);
    assert_eq!(g.total_macs(), 4 * 2 * 64);
}

#[test]
fn counts_match_brute_force_enumeration() {
    let configs = [
        ModelConfig::ewasr(BackbonePreset::Resnet18),
        ModelConfig {
            channel_reduction: true,
            long_skip_srm: false,
            ..ModelConfig::ewasr(BackbonePreset::Resnet18)
        },
        ModelConfig::wasr_light(BackbonePreset::Resnet18),
        ModelConfig::wasr_ref(),
        light_tiny(),
    ];
    for cfg in configs {
        let m = Model::build_meta(&cfg).unwrap();
        let all: u64 = m
            .params()
            .entries()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(_, e)| e.shape.numel() as u64)
            .sum();
        let report = count_costs(&m).unwrap();
        assert_eq!(report.total_params, all);
        assert_eq!(report.total_params, m.num_params() as u64);
        for (name, n) in count_params(&m) {
            let brute: u64 = m
                .params()
                .entries()
                .filter(|(_, e)| e.kind.trainable() && e.name.starts_with(&format!("{name}.")))
                .map(|(_, e)| e.shape.numel() as u64)
                .sum();
            assert_eq!(n, brute, "{name}");
        }
        assert_eq!(report.blocks.iter().map(|b| b.params).sum::<u64>(), report.total_params);
        assert_eq!(report.blocks.iter().map(|b| b.macs).sum::<u64>(), report.total_macs);
        let (g, _) = m.meta_pass().unwrap();
        assert_eq!(report.total_macs, g.total_macs());
    }
}

#[test]
fn block_macs_equal_their_op_sums() {
    let m = Model::build_meta(&ModelConfig::wasr_ref()).unwrap();
    let report = count_costs(&m).unwrap();
    let (g, _) = m.meta_pass().unwrap();
    for b in report.blocks.iter().filter(|b| b.name != "other") {
        let sum: u64 = g.op_stats().filter(|s| under(s.scope, &b.name)).map(|s| s.macs).sum();
        assert_eq!(b.macs, sum, "{}", b.name);
    }
}

#[test]
fn resnet18_encoder_cost() {
    let (params, macs) = encoder_cost(BackbonePreset::Resnet18, Some(1000), 384, 512).unwrap();
    assert!(within(params as f64, 11.7e6, 0.02), "{params}");
    assert!(within(macs as f64, 7.2e9, 0.10), "{macs}");
}

#[test]
fn wasr_reference_decoder_costs() {
    let r = count_config(&ModelConfig::wasr_ref()).unwrap();
    let expect = [
        ("aspp1", 1.77e6),
        ("carm1", 4.20e6),
        ("ffm", 21.28e6),
        ("carm2", 0.79e6),
        ("aspp", 0.11e6),
        ("ffm1", 13.91e6),
    ];
    for (name, p) in expect {
        let b = r.block(name).unwrap();
        assert!(within(b.params as f64, p, 0.10), "{name}: {}", b.params);
    }
    let macs = |n: &str| r.block(n).unwrap().macs;
    let order = ["ffm1", "ffm", "aspp1", "carm2", "aspp", "carm1"];
    for w in order.windows(2) {
        assert!(macs(w[0]) > macs(w[1]), "{} vs {}", w[0], w[1]);
    }
    assert!(r.convention.contains("multiply-accumulate"));
}

#[test]
fn every_replacement_reduces_macs() {
    for base in [ModelConfig::wasr_ref(), ModelConfig::wasr_light(BackbonePreset::Resnet18)] {
        let sweep = replacement_sweep(&base).unwrap();
        assert_eq!(sweep.variants.len(), WASR_BLOCKS.len());
        for v in &sweep.variants {
            assert!(v.delta_macs < 0, "{}: {}", v.block, v.delta_macs);
            assert_eq!(v.macs as i64, sweep.base_macs as i64 + v.delta_macs);
        }
    }
    assert!(replacement_sweep(&ModelConfig::ewasr(BackbonePreset::Tiny)).is_err());
}

#[test]
fn identical_images_have_zero_diversity() {
    let s = synth_scene(3, 0, 64, 64);
    let copies: Vec<SegSample> = (0..4)
        .map(|i| SegSample {
            id: format!("copy{i}"),
            ..s.clone()
        })
        .collect();
    let m = Model::build(&light_tiny()).unwrap();
    let div = channel_weight_diversity(&m, &copies, 10, 3).unwrap();
    assert!(!div.is_empty());
    for d in &div {
        assert_eq!(d.images, 4);
        assert!(d.stds.iter().all(|&v| v == 0.0), "{}", d.gate);
        assert_eq!(d.histogram.counts[0], d.channels as u64);
    }
}

#[test]
fn diversity_matches_direct_std_and_is_bounded() {
    let samples = scenes(6, 12);
    for cfg in [light_tiny(), ModelConfig::ewasr(BackbonePreset::Tiny).with_input(64, 64)] {
        let m = Model::build(&cfg).unwrap();
        let acts = channel_gate_activations(&m, &samples, 4).unwrap();
        let div = channel_weight_diversity(&m, &samples, 20, 4).unwrap();
        assert_eq!(acts.len(), div.len());
        for (a, d) in acts.iter().zip(&div) {
            assert_eq!(a.values.len(), 6);
            for (c, &s) in d.stds.iter().enumerate() {
                let xs: Vec<f64> = a.values.iter().map(|v| v[c]).collect();
                let mean = xs.iter().sum::<f64>() / 6.0;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 6.0;
                assert!((s - var.sqrt()).abs() <= 1e-12);
                assert!((0.0..=MAX_GATE_STD).contains(&s));
            }
            assert_eq!(d.histogram.counts.iter().sum::<u64>(), d.channels as u64);
        }
    }
}

#[test]
fn imu_weights_lie_in_the_open_unit_interval() {
    let m = Model::build(&light_tiny()).unwrap();
    for s in scenes(4, 5) {
        let w = imu_channel_weight(&m, &s).unwrap();
        assert_eq!(w.iter().map(|x| x.gate.as_str()).collect::<Vec<_>>(), ["carm1.gate", "carm2.gate"]);
        assert!(w.iter().all(|x| x.weight > 0.0 && x.weight < 1.0));
    }
    let e = Model::build(&ModelConfig::ewasr(BackbonePreset::Tiny).with_input(64, 64)).unwrap();
    assert!(imu_channel_weight(&e, &scenes(1, 5)[0]).unwrap().is_empty());
    assert!(rank_by_imu_weight(&e, &scenes(2, 5), 2).is_err());
}

#[test]
fn zeroed_gate_gives_exactly_one_half() {
    let mut m = Model::build(&light_tiny()).unwrap();
    m.params_mut().fill_under("carm1.gate", 0.0);
    m.params_mut().fill_under("carm2.gate", 0.0);
    for s in scenes(3, 9) {
        for w in imu_channel_weight(&m, &s).unwrap() {
            assert_eq!(w.weight, 0.5);
        }
    }
}

#[test]
fn ranking_is_a_permutation_independent_of_input_order() {
    let m = Model::build(&light_tiny()).unwrap();
    let samples = scenes(8, 21);
    let ranked = rank_by_imu_weight(&m, &samples, 3).unwrap();
    let mut ids: Vec<_> = ranked.iter().map(|r| r.id.clone()).collect();
    assert!(ranked.windows(2).all(|w| w[0].weight >= w[1].weight));
    let mut reversed = samples.clone();
    reversed.reverse();
    let again = rank_by_imu_weight(&m, &reversed, 5).unwrap();
    assert_eq!(again.iter().map(|r| &r.id).collect::<Vec<_>>(), ids.iter().collect::<Vec<_>>());
    ids.sort();
    assert_eq!(ids, samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
    // Ties fall back to the id.
    let mut zeroed = m.clone();
    zeroed.params_mut().fill_under("carm1.gate", 0.0);
    zeroed.params_mut().fill_under("carm2.gate", 0.0);
    let tied = rank_by_imu_weight(&zeroed, &reversed, 2).unwrap();
    assert_eq!(tied.iter().map(|r| r.id.clone()).collect::<Vec<_>>(), ids);
}

#[test]
fn timing_fills_every_block() {
    let m = Model::build(&light_tiny()).unwrap();
    let mut r = count_costs(&m).unwrap();
    let cfg = TimingConfig {
        repeats: 1,
        warmup: 0,
        ..TimingConfig::default()
    };
    time_blocks(&m, &mut r, &cfg).unwrap();
    let t = r.timing.as_ref().unwrap();
    assert_eq!(t.repeats, 1);
    assert!(t.single_threaded);
    assert_eq!(t.max_jitter, 0.0);
    for b in &r.blocks {
        assert!(b.total_ms.unwrap() >= 0.0);
        assert_eq!(b.total_ms, b.total_ms_max);
    }
    let bad = TimingConfig {
        repeats: 0,
        ..TimingConfig::default()
    };
    assert!(time_blocks(&m, &mut r, &bad).is_err());
}

#[test]
fn fusion_blocks_are_the_slowest_decoder_blocks() {
    let m = Model::build(&ModelConfig::wasr_ref().with_input(64, 96)).unwrap();
    let mut r = count_costs(&m).unwrap();
    let cfg = TimingConfig {
        repeats: 3,
        ..TimingConfig::default()
    };
    time_blocks(&m, &mut r, &cfg).unwrap();
    let mut dec: Vec<_> = r.blocks.iter().filter(|b| WASR_BLOCKS.contains(&b.name.as_str())).collect();
    dec.sort_by(|a, b| b.total_ms.unwrap().total_cmp(&a.total_ms.unwrap()));
    let mut top = [dec[0].name.as_str(), dec[1].name.as_str()];
    top.sort();
    assert_eq!(top, ["ffm", "ffm1"]);
}

#[test]
fn report_serialises_and_tabulates() {
    let r = count_config(&ModelConfig::wasr_ref()).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: CostReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let table = r.table();
    for b in &r.blocks {
        assert!(table.lines().any(|l| l.starts_with(&b.name)), "{}", b.name);
    }
}
