//! Per-block cost analysis (parameters, MACs, wall time), the 1×1
//! replacement sweep, channel re-weighting diversity and IMU channel
//! weights.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackbonePreset};
use crate::data::{batch, SegSample};
use crate::error::{config_err, Result};
use crate::graph::{Graph, Mode, RecordKind};
use crate::models::{Model, ModelConfig, Replacement, WASR_BLOCKS};
use crate::par;
use crate::params::{init_rng, under, ParamBuilder, ParamStore};
use crate::tensor::{Shape, Tensor};

/// How MACs are counted; stamped on every report.
pub const FLOP_CONVENTION: &str = "1 unit = 1 multiply-accumulate; counts convolution MACs and elementwise gating \
products; pooling, normalisation, activation, resize and addition are excluded";

/// Cost of one top-level block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Median total wall time of the block's operations over the repeats.
    pub total_ms: Option<f64>,
    /// Largest total wall time observed over the repeats.
    pub total_ms_max: Option<f64>,
    /// Median over repeats of the slowest single operation in the block.
    pub max_op_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingMeta {
    pub repeats: usize,
    pub warmup: usize,
    /// Worker threads available to kernels during measurement.
    pub threads: usize,
    /// Set when measurement ran on a single thread as required.
    pub single_threaded: bool,
    pub os: String,
    pub arch: String,
    pub host_cpus: usize,
    /// Largest relative spread `(max − min) / median` of any block total.
    pub max_jitter: f64,
    pub jitter_bound: f64,
    pub within_jitter_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub version: String,
    pub model: ModelConfig,
    pub input_height: usize,
    pub input_width: usize,
    pub convention: String,
    pub blocks: Vec<BlockCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub timing: Option<TimingMeta>,
}

/// Parameters per top-level block.
pub fn count_params(model: &Model) -> Vec<(String, u64)> {
    model
        .summary()
        .iter()
        .map(|b| (b.name.clone(), model.params().num_trainable_under(&b.name) as u64))
        .collect()
}

/// Parameter and MAC counts per block at the configured input resolution.
/// Works on shape-only models.
pub fn count_costs(model: &Model) -> Result<CostReport> {
    let (g, _) = model.meta_pass()?;
    let mut blocks: Vec<BlockCost> = count_params(model)
        .into_iter()
        .map(|(name, params)| BlockCost {
            macs: g.macs_under(&name),
            name,
            params,
            total_ms: None,
            total_ms_max: None,
            max_op_ms: None,
        })
        .collect();
    let total_macs = g.total_macs();
    let covered: u64 = blocks.iter().map(|b| b.macs).sum();
    if covered != total_macs {
        blocks.push(BlockCost {
            name: "other".into(),
            params: 0,
            macs: total_macs - covered,
            total_ms: None,
            total_ms_max: None,
            max_op_ms: None,
        });
    }
    let cfg = model.config();
    Ok(CostReport {
        version: env!("CARGO_PKG_VERSION").into(),
        model: cfg.clone(),
        input_height: cfg.input_height,
        input_width: cfg.input_width,
        convention: FLOP_CONVENTION.into(),
        total_params: blocks.iter().map(|b| b.params).sum(),
        total_macs,
        blocks,
        timing: None,
    })
}

/// Builds a shape-only model for `cfg` and counts it.
pub fn count_config(cfg: &ModelConfig) -> Result<CostReport> {
    count_costs(&Model::build_meta(cfg)?)
}

/// Parameters and MACs of a bare encoder with an optional classifier head
/// (global pooling + fully connected layer).
pub fn encoder_cost(preset: BackbonePreset, classes: Option<usize>, height: usize, width: usize) -> Result<(u64, u64)> {
    let mut ps = ParamStore::meta();
    let mut rng = init_rng(0);
    let bb = Backbone::new(&mut ParamBuilder::new(&mut ps, &mut rng), preset, classes);
    let mut g = Graph::meta(Mode::Eval);
    let x = g.input_shape(Shape::new(1, 3, height, width));
    let taps = bb.forward(&mut g, &ps, x)?;
    if classes.is_some() {
        bb.classify(&mut g, &ps, taps[3])?;
    }
    Ok((ps.num_trainable() as u64, g.total_macs()))
}

// ----- timing ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub repeats: usize,
    pub warmup: usize,
    /// Run kernels on one thread while measuring.
    pub sequential: bool,
    pub jitter_bound: f64,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 1,
            sequential: true,
            jitter_bound: 0.5,
            seed: 0,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A deterministic pseudo-image and a horizontal-horizon IMU mask.
fn probe_input(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    use rand::Rng;
    let mut rng = init_rng(seed);
    let img: Vec<f64> = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
    let imu: Vec<f64> = (0..h * w).map(|i| if i / w < h / 2 { 1.0 } else { 0.0 }).collect();
    (
        Tensor::from_vec(Shape::new(1, 3, h, w), img).expect("sized"),
        Tensor::from_vec(Shape::new(1, 1, h, w), imu).expect("sized"),
    )
}

/// Measures per-block wall time over `repeats` evaluation passes after
/// `warmup` untimed passes, and fills the timing fields of `report`.
/// Per-block totals and max-op times for each repeat, and the thread count.
type TimingRuns = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize);

pub fn time_blocks(model: &Model, report: &mut CostReport, cfg: &TimingConfig) -> Result<()> {
    if cfg.repeats == 0 {
        return Err(config_err!("repeats must be >= 1"));
    }
    let (h, w) = (model.config().input_height, model.config().input_width);
    let (image, imu) = probe_input(h, w, cfg.seed);
    let names: Vec<String> = report.blocks.iter().map(|b| b.name.clone()).collect();
    let run = || -> Result<TimingRuns> {
        for _ in 0..cfg.warmup {
            model.forward(&image, &imu)?;
        }
        let mut totals = vec![Vec::new(); names.len()];
        let mut maxes = vec![Vec::new(); names.len()];
        for _ in 0..cfg.repeats {
            let mut g = Graph::new(Mode::Eval).with_timing(true);
            let x = g.input(image.clone());
            model.forward_graph(&mut g, x, &imu)?;
            for (i, name) in names.iter().enumerate() {
                let (mut sum, mut max) = (0.0f64, 0.0f64);
                for s in g.op_stats().filter(|s| under(s.scope, name)) {
                    let ms = s.elapsed.as_secs_f64() * 1e3;
                    sum += ms;
                    max = max.max(ms);
                }
                totals[i].push(sum);
                maxes[i].push(max);
            }
        }
        Ok((totals, maxes, par::num_threads()))
    };
    let (totals, maxes, threads) = if cfg.sequential {
        par::with_parallel(false, run)?
    } else {
        run()?
    };
    let mut max_jitter = 0.0f64;
    for (i, b) in report.blocks.iter_mut().enumerate() {
        let mut t = totals[i].clone();
        let med = median(&mut t);
        let (lo, hi) = (t[0], t[t.len() - 1]);
        if med > 0.0 {
            max_jitter = max_jitter.max((hi - lo) / med);
        }
        b.total_ms = Some(med);
        b.total_ms_max = Some(hi);
        b.max_op_ms = Some(median(&mut maxes[i].clone()));
    }
    report.timing = Some(TimingMeta {
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        threads,
        single_threaded: threads == 1,
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        host_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        max_jitter,
        jitter_bound: cfg.jitter_bound,
        within_jitter_bound: max_jitter <= cfg.jitter_bound,
    });
    Ok(())
}

// ----- block replacement sweep -------------------------------------------------------

/// Cost change from swapping one WaSR block for a 1×1 convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementCost {
    pub block: String,
    pub params: u64,
    pub macs: u64,
    pub delta_params: i64,
    pub delta_macs: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementSweep {
    pub base_params: u64,
    pub base_macs: u64,
    pub variants: Vec<ReplacementCost>,
}

/// Counts the base WaSR model and every single-block replacement variant.
pub fn replacement_sweep(base: &ModelConfig) -> Result<ReplacementSweep> {
    if !base.variant.is_wasr() {
        return Err(config_err!("block replacement applies to WaSR variants only"));
    }
    let b = count_config(base)?;
    let variants = par::map(WASR_BLOCKS.len(), |i| {
        let mut cfg = base.clone();
        cfg.block_replacements.insert(WASR_BLOCKS[i].to_string(), Replacement::Conv1x1);
        count_config(&cfg).map(|r| ReplacementCost {
            block: WASR_BLOCKS[i].to_string(),
            params: r.total_params,
            macs: r.total_macs,
            delta_params: r.total_params as i64 - b.total_params as i64,
            delta_macs: r.total_macs as i64 - b.total_macs as i64,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ReplacementSweep {
        base_params: b.total_params,
        base_macs: b.total_macs,
        variants,
    })
}

// ----- gate analysis ---------------------------------------------------------------

/// Channel-gate activations of one gate: `values[image][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations {
    pub name: String,
    pub imu_channel: Option<usize>,
    pub values: Vec<Vec<f64>>,
}

/// Runs every sample through the model and collects all channel-gate
/// sigmoid outputs, in record order.
pub fn channel_gate_activations(model: &Model, samples: &[SegSample], batch_size: usize) -> Result<Vec<GateActivations>> {
    let mut gates: Vec<GateActivations> = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, imus, _) = batch(&refs)?;
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(images);
        model.forward_graph(&mut g, x, &imus)?;
        let recs: Vec<_> = g.records().iter().filter(|r| r.kind == RecordKind::ChannelGate).collect();
        if gates.is_empty() {
            gates = recs
                .iter()
                .map(|r| GateActivations {
                    name: r.name.clone(),
                    imu_channel: r.imu_channel,
                    values: Vec::new(),
                })
                .collect();
        }
        for (ga, r) in gates.iter_mut().zip(&recs) {
            let t = g.value(r.var);
            let c = t.shape().c;
            for n in 0..chunk.len() {
                ga.values.push(t.sample(n)[..c].to_vec());
            }
        }
    }
    Ok(gates)
}

/// Population standard deviation of each channel across images.
/// `values[image][channel]`.
pub fn per_channel_std(values: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = values.first() else {
        return Vec::new();
    };
    let n = values.len() as f64;
    (0..first.len())
        .map(|c| {
            let x0 = values[0][c];
            if values.iter().all(|v| v[c] == x0) {
                return 0.0;
            }
            let mean = values.iter().map(|v| v[c]).sum::<f64>() / n;
            (values.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            if v < lo || v > hi {
                continue;
            }
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }
}

/// Largest possible std of a value confined to `[0, 1]`.
pub const MAX_GATE_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDiversity {
    pub gate: String,
    pub channels: usize,
    pub images: usize,
    pub stds: Vec<f64>,
    pub histogram: Histogram,
}

/// Per-channel std of every channel gate across `samples`, with a
/// histogram over `[0, 0.5]`.
pub fn channel_weight_diversity(
    model: &Model,
    samples: &[SegSample],
    bins: usize,
    batch_size: usize,
) -> Result<Vec<GateDiversity>> {
    Ok(channel_gate_activations(model, samples, batch_size)?
        .into_iter()
        .map(|ga| {
            let stds = per_channel_std(&ga.values);
            GateDiversity {
                channels: stds.len(),
                images: ga.values.len(),
                histogram: Histogram::new(&stds, 0.0, MAX_GATE_STD, bins),
                gate: ga.name,
                stds,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuWeight {
    pub gate: String,
    pub channel: usize,
    pub weight: f64,
}

/// Sigmoid gate value at the IMU channel for every channel gate whose input
/// carries the IMU mask. Empty for models without such gates.
pub fn imu_channel_weight(model: &Model, sample: &SegSample) -> Result<Vec<ImuWeight>> {
    imu_weights(model, std::slice::from_ref(sample), 1).map(|mut v| v.pop().unwrap_or_default())
}

fn imu_weights(model: &Model, samples: &[SegSample], batch_size: usize) -> Result<Vec<Vec<ImuWeight>>> {
    let gates = channel_gate_activations(model, samples, batch_size)?;
    Ok((0..samples.len())
        .map(|i| {
            gates
                .iter()
                .filter_map(|ga| {
                    ga.imu_channel.map(|c| ImuWeight {
                        gate: ga.name.clone(),
                        channel: c,
                        weight: ga.values[i][c],
                    })
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub id: String,
    /// Mean IMU weight over all IMU-consuming gates.
    pub weight: f64,
    pub gates: Vec<ImuWeight>,
}

/// Samples ordered by descending mean IMU weight; ties break on the id so
/// the order does not depend on the input order.
pub fn rank_by_imu_weight(model: &Model, samples: &[SegSample], batch_size: usize) -> Result<Vec<RankedSample>> {
    let weights = imu_weights(model, samples, batch_size)?;
    if weights.first().is_some_and(|w| w.is_empty()) {
        return Err(config_err!("model has no IMU-consuming channel gate"));
    }
    let mut ranked: Vec<RankedSample> = samples
        .iter()
        .zip(weights)
        .map(|(s, gates)| RankedSample {
            id: s.id.clone(),
            weight: gates.iter().map(|g| g.weight).sum::<f64>() / gates.len() as f64,
            gates,
        })
        .collect();
    ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.id.cmp(&b.id)));
    Ok(ranked)
}

// ----- text output -----------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

impl CostReport {
    /// Aligned plain-text table: block, params (M), MACs (G), total and
    /// max-op time (ms).
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} / {} at {}x{}",
            self.model.variant.name(),
            self.model.backbone.name(),
            self.input_height,
            self.input_width
        );
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>12} {:>14} {:>14}",
            "block", "params (M)", "MACs (G)", "total (ms)", "max op (ms)"
        );
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:<12} {:>12.3} {:>12.3} {:>14} {:>14}",
                b.name,
                b.params as f64 / 1e6,
                b.macs as f64 / 1e9,
                fmt_opt(b.total_ms),
                fmt_opt(b.max_op_ms)
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>12.3} {:>12.3}",
            "total",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        let _ = writeln!(s, "convention: {}", self.convention);
        s
    }

    pub fn block(&self, name: &str) -> Option<&BlockCost> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 0.25], 0.0, 0.5, 2);
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5]);
    }

    #[test]
    fn two_point_std() {
        let s = per_channel_std(&[vec![0.2, 0.7], vec![0.6, 0.7]]);
        assert!((s[0] - 0.2).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
