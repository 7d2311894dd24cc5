//! Attention, fusion and metaformer blocks shared by all model variants.
//!
//! Blocks own [`ParamId`]s into a [`ParamStore`] and append their operations
//! to a [`Graph`]. Each block also has an `apply` method that runs it in
//! evaluation mode on single [`FeatureMap`]s.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, validation_err, Result};
use crate::graph::{Graph, Mode, RecordKind, Var};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Number of semantic classes predicted by the head: obstacle, water, sky.
pub const NUM_CLASSES: usize = 3;

pub const BN_MOMENTUM: f64 = 0.1;

/// A single `[C, H, W]` feature tensor together with its downsampling
/// factor relative to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        let s = data.shape();
        if s.n != 1 {
            return Err(shape_err!("feature map must hold one sample, got {s}"));
        }
        if s.c == 0 || s.h == 0 || s.w == 0 {
            return Err(shape_err!("feature map with empty extent {s}"));
        }
        if !stride.is_power_of_two() {
            return Err(validation_err!("stride {stride} is not a power of two"));
        }
        if !data.all_finite() {
            return Err(validation_err!("feature map contains non-finite values"));
        }
        Ok(Self { data, stride })
    }

    pub fn from_vec(c: usize, h: usize, w: usize, values: Vec<f64>, stride: usize) -> Result<Self> {
        Self::new(Tensor::from_vec(Shape::new(1, c, h, w), values)?, stride)
    }

    pub fn channels(&self) -> usize {
        self.data.shape().c
    }

    pub fn height(&self) -> usize {
        self.data.shape().h
    }

    pub fn width(&self) -> usize {
        self.data.shape().w
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.at(0, c, y, x)
    }
}

/// Free hyperparameters of a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// MLP expansion factor of metaformer blocks.
    pub hidden_ratio: f64,
    /// ASPP branch dilations.
    pub dilation_rates: Vec<usize>,
    /// sARM convolution size.
    pub spatial_kernel: usize,
    pub norm_epsilon: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            hidden_ratio: 2.0,
            dilation_rates: vec![6, 12, 18],
            spatial_kernel: 7,
            norm_epsilon: 1e-5,
        }
    }
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("block channels must be positive"));
        }
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio.is_finite()) {
            return Err(config_err!("hidden_ratio must be positive, got {}", self.hidden_ratio));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(config_err!("dilation rates must be non-empty and >= 1"));
        }
        let mut rates = self.dilation_rates.clone();
        rates.sort_unstable();
        rates.dedup();
        if rates.len() != self.dilation_rates.len() {
            return Err(config_err!("dilation rates {:?} are not distinct", self.dilation_rates));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(config_err!("spatial kernel {} must be odd", self.spatial_kernel));
        }
        if self.norm_epsilon.is_nan() || self.norm_epsilon <= 0.0 {
            return Err(config_err!("norm epsilon must be positive"));
        }
        Ok(())
    }

    fn hidden_channels(&self) -> usize {
        ((self.in_channels as f64 * self.hidden_ratio).round() as usize).max(1)
    }
}

// ----- layers -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(b: &mut ParamBuilder, name: &str, in_c: usize, out_c: usize, geom: ConvGeom, bias: bool) -> Self {
        let mut s = b.sub(name);
        let weight = s.he_normal("weight", Shape::new(out_c, in_c, geom.kh, geom.kw), in_c * geom.kh * geom.kw);
        let bias = bias.then(|| s.constant("bias", Shape::new(1, out_c, 1, 1), ParamKind::Bias, 0.0));
        Self {
            weight,
            bias,
            geom,
            in_channels: in_c,
            out_channels: out_c,
        }
    }

    pub fn pointwise(b: &mut ParamBuilder, name: &str, in_c: usize, out_c: usize, bias: bool) -> Self {
        Self::new(b, name, in_c, out_c, ConvGeom::pointwise(), bias)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.in_channels {
            return Err(config_err!("convolution expects {} channels, got {c}", self.in_channels));
        }
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, eps: f64) -> Self {
        let mut s = b.sub(name);
        let sh = Shape::new(1, c, 1, 1);
        Self {
            weight: s.constant("weight", sh, ParamKind::NormScale, 1.0),
            bias: s.constant("bias", sh, ParamKind::NormShift, 0.0),
            running_mean: s.constant("running_mean", sh, ParamKind::RunningMean, 0.0),
            running_var: s.constant("running_var", sh, ParamKind::RunningVar, 1.0),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        g.batch_norm(ps, x, self.weight, self.bias, self.running_mean, self.running_var, self.eps, BN_MOMENTUM)
    }
}

/// Convolution without bias followed by batch normalisation and an
/// optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_c: usize,
        out_c: usize,
        geom: ConvGeom,
        relu: bool,
        eps: f64,
    ) -> Self {
        let mut s = b.sub(name);
        Self {
            conv: Conv2d::new(&mut s, "conv", in_c, out_c, geom, false),
            bn: BatchNorm2d::new(&mut s, "bn", out_c, eps),
            relu,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// Per-channel scale and shift; the channel-wise 1×1 convolution used when
/// a pure re-weighting block is replaced by a plain projection.
#[derive(Clone, Debug)]
pub struct ChannelWise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl ChannelWise {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        let sh = Shape::new(1, c, 1, 1);
        Self {
            weight: s.constant("weight", sh, ParamKind::Weight, 1.0),
            bias: s.constant("bias", sh, ParamKind::Bias, 0.0),
            channels: c,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.channel_affine(x, w, b)
    }
}

// ----- attention blocks -----------------------------------------------------

/// Channel attention refinement: `x · sigmoid(conv1x1(gap(x)))`.
#[derive(Clone, Debug)]
pub struct Carm {
    pub conv: Conv2d,
    /// Index of the IMU channel in the gated input, when there is one.
    pub imu_channel: Option<usize>,
}

impl Carm {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Self {
        Self {
            conv: Conv2d::pointwise(b, "gate", channels, channels, true),
            imu_channel: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn gate(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let logits = self.conv.forward(g, ps, pooled)?;
        let gate = g.sigmoid(logits);
        g.record("gate", RecordKind::ChannelGate, gate, self.imu_channel);
        Ok(gate)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.gate(g, ps, x)?;
        g.mul(x, gate)
    }

    pub fn apply(&self, ps: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        run_eval(&[x], x.stride(), |g, v| self.forward(g, ps, v[0]))
    }
}

/// Spatial attention: `x · sigmoid(conv_kxk([mean_c(x), max_c(x)]))`.
#[derive(Clone, Debug)]
pub struct Sarm {
    pub conv: Conv2d,
}

impl Sarm {
    pub fn new(b: &mut ParamBuilder, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(config_err!("spatial kernel {kernel} must be odd"));
        }
        Ok(Self {
            conv: Conv2d::new(b, "gate", 2, 1, ConvGeom::same(kernel, 1), true),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x);
        let max = g.channel_max(x);
        let stacked = g.concat(&[mean, max])?;
        let logits = self.conv.forward(g, ps, stacked)?;
        let gate = g.sigmoid(logits);
        g.record("gate", RecordKind::SpatialGate, gate, None);
        g.mul(x, gate)
    }

    pub fn apply(&self, ps: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        run_eval(&[x], x.stride(), |g, v| self.forward(g, ps, v[0]))
    }
}

/// Feature fusion: `f = ReLU(BN(conv3x3(concat(inputs))))`, then
/// `f + f · sigmoid(conv1x1(ReLU(conv1x1(gap(f)))))`.
#[derive(Clone, Debug)]
pub struct Ffm {
    pub fuse: ConvBn,
    pub gate1: Conv2d,
    pub gate2: Conv2d,
}

impl Ffm {
    pub fn new(b: &mut ParamBuilder, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (i, o) = (cfg.in_channels, cfg.out_channels);
        Ok(Self {
            fuse: ConvBn::new(b, "fuse", i, o, ConvGeom::same(3, 1), true, cfg.norm_epsilon),
            gate1: Conv2d::pointwise(b, "gate1", o, o, true),
            gate2: Conv2d::pointwise(b, "gate2", o, o, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, inputs: &[Var]) -> Result<Var> {
        let x = g.concat(inputs)?;
        let f = self.fuse.forward(g, ps, x)?;
        let pooled = g.global_avg_pool(f);
        let h = self.gate1.forward(g, ps, pooled)?;
        let h = g.relu(h);
        let logits = self.gate2.forward(g, ps, h)?;
        let gate = g.sigmoid(logits);
        g.record("gate", RecordKind::ChannelGate, gate, None);
        let weighted = g.mul(f, gate)?;
        g.add(f, weighted)
    }

    pub fn apply(&self, ps: &ParamStore, inputs: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = inputs.first().ok_or_else(|| shape_err!("fusion of no inputs"))?;
        run_eval(inputs, first.stride(), |g, v| self.forward(g, ps, v))
    }
}

/// Parallel dilated 3×3 convolutions (same padding), summed.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub branches: Vec<Conv2d>,
}

impl Aspp {
    pub fn new(b: &mut ParamBuilder, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .dilation_rates
            .iter()
            .map(|&r| {
                Conv2d::new(
                    b,
                    &format!("branch{r}"),
                    cfg.in_channels,
                    cfg.out_channels,
                    ConvGeom::same(3, r),
                    true,
                )
            })
            .collect();
        Ok(Self { branches })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|c| c.forward(g, ps, x))
            .collect::<Result<Vec<_>>>()?;
        g.add_all(&outs)
    }

    pub fn apply(&self, ps: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        run_eval(&[x], x.stride(), |g, v| self.forward(g, ps, v[0]))
    }
}

// ----- metaformer -----------------------------------------------------------

/// Token mixer of a metaformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerKind {
    /// Channel mixer (cARM); the block is called CRM.
    #[serde(rename = "CRM", alias = "crm")]
    Crm,
    /// Spatial mixer (sARM); the block is called SRM.
    #[serde(rename = "SRM", alias = "srm")]
    Srm,
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixerKind::Crm => "CRM",
            MixerKind::Srm => "SRM",
        })
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Channel(Carm),
    Spatial(Sarm),
}

/// `y1 = x + proj(mixer(BN(x)))`, `y = y1 + conv(ReLU(conv(BN(y1))))`.
#[derive(Clone, Debug)]
pub struct MetaformerBlock {
    pub kind: MixerKind,
    pub norm1: BatchNorm2d,
    pub mixer: Mixer,
    pub proj: Conv2d,
    pub norm2: BatchNorm2d,
    pub mlp1: Conv2d,
    pub mlp2: Conv2d,
}

impl MetaformerBlock {
    pub fn new(b: &mut ParamBuilder, kind: MixerKind, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.in_channels != cfg.out_channels {
            return Err(config_err!(
                "metaformer block must preserve channels ({} -> {})",
                cfg.in_channels,
                cfg.out_channels
            ));
        }
        let c = cfg.in_channels;
        let hidden = cfg.hidden_channels();
        let norm1 = BatchNorm2d::new(b, "norm1", c, cfg.norm_epsilon);
        let mixer = {
            let mut m = b.sub("mixer");
            match kind {
                MixerKind::Crm => Mixer::Channel(Carm::new(&mut m, c)),
                MixerKind::Srm => Mixer::Spatial(Sarm::new(&mut m, cfg.spatial_kernel)?),
            }
        };
        Ok(Self {
            kind,
            norm1,
            mixer,
            proj: Conv2d::pointwise(b, "proj", c, c, true),
            norm2: BatchNorm2d::new(b, "norm2", c, cfg.norm_epsilon),
            mlp1: Conv2d::pointwise(b, "mlp1", c, hidden, true),
            mlp2: Conv2d::pointwise(b, "mlp2", hidden, c, true),
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.in_channels
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.channels() {
            return Err(config_err!("metaformer block expects {} channels, got {c}", self.channels()));
        }
        let n = self.norm1.forward(g, ps, x)?;
        let m = g.scoped("mixer", |g| match &self.mixer {
            Mixer::Channel(carm) => carm.forward(g, ps, n),
            Mixer::Spatial(sarm) => sarm.forward(g, ps, n),
        })?;
        let m = self.proj.forward(g, ps, m)?;
        let y1 = g.add(x, m)?;
        let n = self.norm2.forward(g, ps, y1)?;
        let h = self.mlp1.forward(g, ps, n)?;
        let h = g.relu(h);
        let h = self.mlp2.forward(g, ps, h)?;
        g.add(y1, h)
    }

    pub fn apply(&self, ps: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        run_eval(&[x], x.stride(), |g, v| self.forward(g, ps, v[0]))
    }

    /// Zeroes the mixer output projection and the second MLP convolution,
    /// which turns the block into the identity.
    pub fn zero_residual_branches(&self, ps: &mut ParamStore) {
        for conv in [&self.proj, &self.mlp2] {
            for id in std::iter::once(conv.weight).chain(conv.bias) {
                ps.update(id, |v| v.fill(0.0));
            }
        }
    }
}

// ----- semantic injection ---------------------------------------------------

/// Injects low-resolution semantic features into higher-resolution local
/// features: `BN(conv(local)) · sigmoid(up(BN(conv(sem)))) + up(BN(conv(sem)))`.
///
/// The semantic projections run at the semantic resolution and are then
/// resized bilinearly; with running statistics this equals projecting the
/// resized map, because both projections are affine per pixel.
#[derive(Clone, Debug)]
pub struct Sim {
    pub local: ConvBn,
    pub gate: ConvBn,
    pub semantic: ConvBn,
}

impl Sim {
    pub fn new(b: &mut ParamBuilder, local_c: usize, semantic_c: usize, out_c: usize, eps: f64) -> Self {
        let pw = ConvGeom::pointwise();
        Self {
            local: ConvBn::new(b, "local", local_c, out_c, pw, false, eps),
            gate: ConvBn::new(b, "gate", semantic_c, out_c, pw, false, eps),
            semantic: ConvBn::new(b, "semantic", semantic_c, out_c, pw, false, eps),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.local.conv.out_channels
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, local: Var, semantic: Var) -> Result<Var> {
        let Shape { h, w, .. } = g.shape(local);
        let l = self.local.forward(g, ps, local)?;
        let gl = self.gate.forward(g, ps, semantic)?;
        let gl = g.bilinear(gl, h, w);
        let gate = g.sigmoid(gl);
        let s = self.semantic.forward(g, ps, semantic)?;
        let s = g.bilinear(s, h, w);
        let gated = g.mul(l, gate)?;
        g.add(gated, s)
    }

    pub fn apply(&self, ps: &ParamStore, local: &FeatureMap, semantic: &FeatureMap) -> Result<FeatureMap> {
        run_eval(&[local, semantic], local.stride(), |g, v| self.forward(g, ps, v[0], v[1]))
    }
}

// ----- prediction head ------------------------------------------------------

/// Checks that every value of an IMU mask is 0 or 1.
pub fn validate_imu(imu: &Tensor) -> Result<()> {
    if imu.shape().c != 1 {
        return Err(validation_err!("IMU mask must have one channel, got {}", imu.shape()));
    }
    match imu.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(validation_err!("IMU mask is not binary (found {v})")),
        None => Ok(()),
    }
}

/// Nearest-neighbour resize of a binary IMU mask into the graph as a
/// constant input.
pub fn imu_input(g: &mut Graph, imu: &Tensor, h: usize, w: usize) -> Var {
    if g.is_meta() || imu.is_meta() {
        g.input_shape(imu.shape().with_hw(h, w))
    } else if (imu.shape().h, imu.shape().w) == (h, w) {
        g.input(imu.clone())
    } else {
        g.input(kernels::nearest(imu, h, w))
    }
}

/// `softmax(conv1x1(ReLU(BN(conv1x1(concat(x, imu))))))`, resized bilinearly
/// to the IMU mask's (input) resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub hidden: ConvBn,
    pub classifier: Conv2d,
}

impl SegHead {
    pub fn new(b: &mut ParamBuilder, in_c: usize, hidden_c: usize, eps: f64) -> Self {
        Self {
            hidden: ConvBn::new(b, "hidden", in_c + 1, hidden_c, ConvGeom::pointwise(), true, eps),
            classifier: Conv2d::pointwise(b, "classifier", hidden_c, NUM_CLASSES, true),
        }
    }

    /// Class logits at the feature resolution.
    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, x: Var, imu: &Tensor) -> Result<Var> {
        if !g.is_meta() {
            validate_imu(imu)?;
        }
        let Shape { h, w, .. } = g.shape(x);
        let m = imu_input(g, imu, h, w);
        let z = g.concat(&[x, m])?;
        let z = self.hidden.forward(g, ps, z)?;
        self.classifier.forward(g, ps, z)
    }

    /// Class probabilities at the IMU mask's resolution.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, imu: &Tensor) -> Result<Var> {
        let logits = self.logits(g, ps, x, imu)?;
        let p = g.softmax_channels(logits);
        Ok(g.bilinear(p, imu.shape().h, imu.shape().w))
    }

    /// Runs the head on one feature map; returns `[3, H, W]` probabilities.
    pub fn apply(&self, ps: &ParamStore, x: &FeatureMap, imu: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval);
        let v = g.input(x.tensor().clone());
        let p = self.forward(&mut g, ps, v, imu)?;
        Ok(g.value(p).clone())
    }
}

fn run_eval(
    inputs: &[&FeatureMap],
    stride: usize,
    f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<FeatureMap> {
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.tensor().clone())).collect();
    let y = f(&mut g, &vars)?;
    FeatureMap::new(g.value(y).clone(), stride)
}
