//! Model assembly: eWaSR, the WaSR decoder over a light encoder
//! (WaSR-Light), and the dilated ResNet-101 WaSR reference graph.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{concat_at_coarsest, Backbone, BackbonePreset, ChannelReducer, INPUT_MULTIPLE};
use crate::blocks::{
    imu_input, validate_imu, Aspp, BlockConfig, Carm, ChannelWise, Conv2d, Ffm, MetaformerBlock,
    MixerKind, SegHead, Sim, NUM_CLASSES,
};
use crate::checkpoint::Checkpoint;
use crate::error::{config_err, validation_err, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{init_rng, ParamBuilder, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ewasr,
    WasrLight,
    /// Untrained reference graph used for cost analysis.
    WasrRef,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ewasr => "ewasr",
            Variant::WasrLight => "wasr_light",
            Variant::WasrRef => "wasr_ref",
        }
    }

    pub fn is_wasr(self) -> bool {
        matches!(self, Variant::WasrLight | Variant::WasrRef)
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ewasr" => Ok(Self::Ewasr),
            "wasr_light" => Ok(Self::WasrLight),
            "wasr_ref" => Ok(Self::WasrRef),
            _ => Err(config_err!("unknown model variant {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    #[default]
    Keep,
    /// Swap the block for a 1×1 convolution with the same input and output
    /// channels (channel-wise when the block only re-weights channels).
    Conv1x1,
}

/// Decoder blocks of the WaSR variants, in execution order.
pub const WASR_BLOCKS: [&str; 6] = ["aspp1", "carm1", "ffm", "carm2", "ffm1", "aspp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackbonePreset,
    /// Mixer of each LSSE metaformer block.
    pub lsse_layout: Vec<MixerKind>,
    /// Pass the stride-8 skip connection through two SRM blocks.
    pub long_skip_srm: bool,
    /// Halve every tap's channels with a 1×1 convolution before fusion.
    pub channel_reduction: bool,
    /// WaSR decoder blocks to replace (see [`WASR_BLOCKS`]).
    pub block_replacements: BTreeMap<String, Replacement>,
    pub input_height: usize,
    pub input_width: usize,
    /// eWaSR SIM and head width; `None` picks a preset-dependent default.
    pub decoder_channels: Option<usize>,
    /// WaSR FFM/FFM1 width; `None` picks a preset-dependent default.
    pub fusion_channels: Option<usize>,
    /// Output channels of the WaSR deep-feature ASPP.
    pub aspp1_channels: usize,
    pub hidden_ratio: f64,
    pub spatial_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ewasr,
            backbone: BackbonePreset::Resnet18,
            lsse_layout: vec![MixerKind::Crm, MixerKind::Srm, MixerKind::Srm],
            long_skip_srm: true,
            channel_reduction: false,
            block_replacements: BTreeMap::new(),
            input_height: 384,
            input_width: 512,
            decoder_channels: None,
            fusion_channels: None,
            aspp1_channels: 32,
            hidden_ratio: 2.0,
            spatial_kernel: 7,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ewasr(backbone: BackbonePreset) -> Self {
        Self {
            backbone,
            ..Self::default()
        }
    }

    pub fn wasr_light(backbone: BackbonePreset) -> Self {
        Self {
            variant: Variant::WasrLight,
            backbone,
            ..Self::default()
        }
    }

    pub fn wasr_ref() -> Self {
        Self {
            variant: Variant::WasrRef,
            backbone: BackbonePreset::Resnet101Dilated,
            ..Self::default()
        }
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn decoder_width(&self) -> usize {
        self.decoder_channels.unwrap_or(match self.backbone {
            BackbonePreset::Tiny => 32,
            _ => 128,
        })
    }

    pub fn fusion_width(&self) -> usize {
        self.fusion_channels.unwrap_or(match self.backbone {
            BackbonePreset::Tiny => 32,
            BackbonePreset::Resnet18 => 256,
            BackbonePreset::Resnet101Dilated => 1024,
        })
    }

    fn replaced(&self, block: &str) -> bool {
        self.block_replacements.get(block) == Some(&Replacement::Conv1x1)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.input_height, self.input_width);
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(config_err!("input resolution {h}x{w} must be a positive multiple of {INPUT_MULTIPLE}"));
        }
        if self.variant == Variant::WasrRef && self.backbone != BackbonePreset::Resnet101Dilated {
            return Err(config_err!("wasr_ref requires the resnet101_dilated backbone"));
        }
        match self.variant {
            Variant::Ewasr => {
                if self.lsse_layout.is_empty() {
                    return Err(config_err!("lsse_layout must not be empty"));
                }
                if let Some(name) = self.block_replacements.keys().next() {
                    return Err(config_err!("eWaSR has no replaceable block {name:?}"));
                }
            }
            Variant::WasrLight | Variant::WasrRef => {
                if self.channel_reduction {
                    return Err(config_err!("channel_reduction applies to eWaSR only"));
                }
                if let Some(name) = self.block_replacements.keys().find(|k| !WASR_BLOCKS.contains(&k.as_str())) {
                    return Err(config_err!("unknown block {name:?}; expected one of {WASR_BLOCKS:?}"));
                }
            }
        }
        if self.decoder_channels == Some(0) || self.fusion_channels == Some(0) || self.aspp1_channels == 0 {
            return Err(config_err!("decoder widths must be positive"));
        }
        BlockConfig {
            hidden_ratio: self.hidden_ratio,
            spatial_kernel: self.spatial_kernel,
            ..BlockConfig::default()
        }
        .validate()
    }
}

/// One row of the model summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub params: usize,
}

// ----- eWaSR ----------------------------------------------------------------

/// eWaSR decoder stages in execution order.
#[derive(Clone, Debug)]
pub struct EwasrDecoder {
    pub reducer: Option<ChannelReducer>,
    pub lsse: Vec<MetaformerBlock>,
    pub sim16: Sim,
    /// Empty when `long_skip_srm` is off.
    pub long_skip: Vec<MetaformerBlock>,
    pub sim8: Sim,
    pub head: SegHead,
}

// ----- WaSR -----------------------------------------------------------------

/// A WaSR decoder block or its 1×1 replacement. Multiple inputs are
/// concatenated along channels first.
#[derive(Clone, Debug)]
enum WasrBlock {
    Aspp(Aspp),
    Arm { carm: Carm, proj: Option<Conv2d> },
    Ffm(Ffm),
    Pointwise(Conv2d),
    ChannelWise(ChannelWise),
}

impl WasrBlock {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, inputs: &[Var]) -> Result<Var> {
        if let WasrBlock::Ffm(f) = self {
            return f.forward(g, ps, inputs);
        }
        let x = g.concat(inputs)?;
        match self {
            WasrBlock::Aspp(a) => a.forward(g, ps, x),
            WasrBlock::Arm { carm, proj } => {
                let y = carm.forward(g, ps, x)?;
                match proj {
                    Some(p) => p.forward(g, ps, y),
                    None => Ok(y),
                }
            }
            WasrBlock::Pointwise(c) => c.forward(g, ps, x),
            WasrBlock::ChannelWise(c) => c.forward(g, ps, x),
            WasrBlock::Ffm(_) => unreachable!(),
        }
    }
}

#[derive(Clone, Debug)]
struct WasrDecoder {
    aspp1: WasrBlock,
    carm1: WasrBlock,
    ffm: WasrBlock,
    carm2: WasrBlock,
    ffm1: WasrBlock,
    aspp: WasrBlock,
}

#[derive(Clone, Debug)]
enum Decoder {
    Ewasr(Box<EwasrDecoder>),
    Wasr(Box<WasrDecoder>),
}

/// Graph outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[n, 3, H, W]` class probabilities at input resolution.
    pub probs: Var,
    /// Third encoder stage output, used by the separation loss.
    pub features: Var,
}

/// Evaluation-mode forward result.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Tensor,
    pub features: Tensor,
}

impl Prediction {
    /// Per-pixel arg-max class labels of sample `n`, row-major.
    pub fn labels(&self, n: usize) -> Vec<u8> {
        argmax_labels(&self.probs, n)
    }
}

/// Per-pixel arg-max over the class axis of sample `n`.
pub fn argmax_labels(probs: &Tensor, n: usize) -> Vec<u8> {
    let s = probs.shape();
    let plane = probs.sample(n);
    (0..s.hw())
        .map(|p| {
            let mut best = 0;
            for c in 1..s.c {
                if plane[c * s.hw() + p] > plane[best * s.hw() + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    decoder: Decoder,
    summary: Vec<BlockSummary>,
}

impl Model {
    /// Builds a model with seeded He initialisation.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_in(config, ParamStore::new())
    }

    /// Builds a shape-only model for cost analysis.
    pub fn build_meta(config: &ModelConfig) -> Result<Self> {
        Self::build_in(config, ParamStore::meta())
    }

    fn build_in(config: &ModelConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let backbone = Backbone::new(&mut b.sub("backbone"), config.backbone, None);
        let mut summary = Vec::new();
        let decoder = match config.variant {
            Variant::Ewasr => Decoder::Ewasr(Box::new(build_ewasr(&mut b, config, &mut summary)?)),
            Variant::WasrLight | Variant::WasrRef => Decoder::Wasr(Box::new(build_wasr(&mut b, config, &mut summary)?)),
        };
        let taps = config.backbone.tap_channels();
        summary.insert(
            0,
            BlockSummary {
                name: "backbone".into(),
                in_channels: 3,
                out_channels: taps[3],
                stride: config.backbone.tap_strides()[3],
                params: 0,
            },
        );
        for row in &mut summary {
            row.params = params.num_trainable_under(&row.name);
        }
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            decoder,
            summary,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn summary(&self) -> &[BlockSummary] {
        &self.summary
    }

    /// Names of the top-level blocks, in execution order.
    pub fn block_names(&self) -> Vec<String> {
        self.summary.iter().map(|s| s.name.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn ewasr_decoder(&self) -> Option<&EwasrDecoder> {
        match &self.decoder {
            Decoder::Ewasr(d) => Some(d),
            Decoder::Wasr(_) => None,
        }
    }

    /// Channels entering the LSSE (eWaSR only).
    pub fn lsse_in_channels(&self) -> Option<usize> {
        match &self.decoder {
            Decoder::Ewasr(d) => Some(d.lsse[0].channels()),
            Decoder::Wasr(_) => None,
        }
    }

    /// Replaces the encoder weights with the `backbone.*` entries of a
    /// checkpoint archive (e.g. converted ImageNet weights).
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<usize> {
        Checkpoint::load(path)?.load_under(&mut self.params, "backbone")
    }

    /// Zeroes every LSSE block's residual branches (eWaSR only).
    pub fn zero_lsse_residuals(&mut self) {
        if let Decoder::Ewasr(d) = &self.decoder {
            for blk in &d.lsse {
                blk.zero_residual_branches(&mut self.params);
            }
        }
    }

    /// Appends the full network to `g`. `image` is `[n, 3, H, W]`, `imu`
    /// the matching `[n, 1, H, W]` binary horizon mask.
    pub fn forward_graph(&self, g: &mut Graph, image: Var, imu: &Tensor) -> Result<ForwardVars> {
        let is = g.shape(image);
        let ms = imu.shape();
        if (ms.n, ms.c, ms.h, ms.w) != (is.n, 1, is.h, is.w) {
            return Err(validation_err!("IMU mask {ms} does not match image {is}"));
        }
        if !g.is_meta() {
            validate_imu(imu)?;
        }
        let ps = &self.params;
        let taps = g.scoped("backbone", |g| self.backbone.forward(g, ps, image))?;
        let strides = self.backbone.tap_strides();
        let features = taps[2];
        let probs = match &self.decoder {
            Decoder::Ewasr(d) => ewasr_forward(d, g, ps, &taps, &strides, imu)?,
            Decoder::Wasr(d) => wasr_forward(d, g, ps, &taps, imu)?,
        };
        Ok(ForwardVars { probs, features })
    }

    /// Evaluation-mode inference.
    pub fn forward(&self, image: &Tensor, imu: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(image.clone());
        let out = self.forward_graph(&mut g, x, imu)?;
        Ok(Prediction {
            probs: g.value(out.probs).clone(),
            features: g.value(out.features).clone(),
        })
    }

    /// Runs a shape-only pass at the configured resolution and returns
    /// the populated graph (MACs, scopes) and the probability output.
    pub fn meta_pass(&self) -> Result<(Graph, ForwardVars)> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut g = Graph::meta(Mode::Eval);
        let x = g.input_shape(Shape::new(1, 3, h, w));
        let imu = Tensor::meta(Shape::new(1, 1, h, w));
        let out = self.forward_graph(&mut g, x, &imu)?;
        Ok((g, out))
    }

    /// Structured text summary: one line per block.
    pub fn summary_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "model {} backbone={} input={}x{}",
            self.config.variant.name(),
            self.config.backbone.name(),
            self.config.input_height,
            self.config.input_width
        )?;
        writeln!(f, "{:<12} {:>8} {:>8} {:>7} {:>12}", "block", "in_ch", "out_ch", "stride", "params")?;
        for s in &self.summary {
            writeln!(
                f,
                "{:<12} {:>8} {:>8} {:>7} {:>12}",
                s.name, s.in_channels, s.out_channels, s.stride, s.params
            )?;
        }
        write!(f, "total params {}", self.num_params())
    }
}

fn row(name: &str, in_channels: usize, out_channels: usize, stride: usize) -> BlockSummary {
    BlockSummary {
        name: name.into(),
        in_channels,
        out_channels,
        stride,
        params: 0,
    }
}

fn build_ewasr(b: &mut ParamBuilder, cfg: &ModelConfig, summary: &mut Vec<BlockSummary>) -> Result<EwasrDecoder> {
    let eps = BlockConfig::default().norm_epsilon;
    let mut taps = cfg.backbone.tap_channels().to_vec();
    let strides = cfg.backbone.tap_strides();
    let reducer = cfg.channel_reduction.then(|| {
        let r = ChannelReducer::new(&mut b.sub("reduce"), &taps);
        summary.push(row("reduce", taps.iter().sum(), r.out_channels().iter().sum(), strides[3]));
        taps = r.out_channels();
        r
    });
    let width: usize = taps.iter().sum();
    let block_cfg = BlockConfig {
        in_channels: width,
        out_channels: width,
        hidden_ratio: cfg.hidden_ratio,
        spatial_kernel: cfg.spatial_kernel,
        ..BlockConfig::default()
    };
    let lsse = {
        let mut lb = b.sub("lsse");
        cfg.lsse_layout
            .iter()
            .enumerate()
            .map(|(i, &kind)| MetaformerBlock::new(&mut lb.sub(&i.to_string()), kind, &block_cfg))
            .collect::<Result<Vec<_>>>()?
    };
    summary.push(row("lsse", width, width, strides[3]));
    let d = cfg.decoder_width();
    let sim16 = Sim::new(&mut b.sub("sim16"), taps[2], width, d, eps);
    summary.push(row("sim16", taps[2] + width, d, strides[2]));
    let long_skip = if cfg.long_skip_srm {
        let skip_cfg = BlockConfig {
            in_channels: taps[1],
            out_channels: taps[1],
            ..block_cfg.clone()
        };
        let mut sb = b.sub("long_skip");
        let blocks = (0..2)
            .map(|i| MetaformerBlock::new(&mut sb.sub(&i.to_string()), MixerKind::Srm, &skip_cfg))
            .collect::<Result<Vec<_>>>()?;
        summary.push(row("long_skip", taps[1], taps[1], strides[1]));
        blocks
    } else {
        Vec::new()
    };
    let sim8 = Sim::new(&mut b.sub("sim8"), taps[1], d, d, eps);
    summary.push(row("sim8", taps[1] + d, d, strides[1]));
    let head = SegHead::new(&mut b.sub("head"), d, d, eps);
    summary.push(row("head", d + 1, NUM_CLASSES, 1));
    Ok(EwasrDecoder {
        reducer,
        lsse,
        sim16,
        long_skip,
        sim8,
        head,
    })
}

fn ewasr_forward(
    d: &EwasrDecoder,
    g: &mut Graph,
    ps: &ParamStore,
    taps: &[Var],
    strides: &[usize],
    imu: &Tensor,
) -> Result<Var> {
    let taps = match &d.reducer {
        Some(r) => g.scoped("reduce", |g| r.forward(g, ps, taps))?,
        None => taps.to_vec(),
    };
    let semantic = g.scoped("lsse", |g| -> Result<Var> {
        let mut x = concat_at_coarsest(g, &taps, strides)?;
        for (i, blk) in d.lsse.iter().enumerate() {
            x = g.scoped(&i.to_string(), |g| blk.forward(g, ps, x))?;
        }
        Ok(x)
    })?;
    let s16 = g.scoped("sim16", |g| d.sim16.forward(g, ps, taps[2], semantic))?;
    let local8 = g.scoped("long_skip", |g| -> Result<Var> {
        let mut x = taps[1];
        for (i, blk) in d.long_skip.iter().enumerate() {
            x = g.scoped(&i.to_string(), |g| blk.forward(g, ps, x))?;
        }
        Ok(x)
    })?;
    let s8 = g.scoped("sim8", |g| d.sim8.forward(g, ps, local8, s16))?;
    g.scoped("head", |g| d.head.forward(g, ps, s8, imu))
}

fn build_wasr(b: &mut ParamBuilder, cfg: &ModelConfig, summary: &mut Vec<BlockSummary>) -> Result<WasrDecoder> {
    let eps = BlockConfig::default().norm_epsilon;
    let taps = cfg.backbone.tap_channels();
    let strides = cfg.backbone.tap_strides();
    let f = cfg.fusion_width();
    let a1 = cfg.aspp1_channels;

    let aspp_cfg = |i, o, rates: &[usize]| BlockConfig {
        in_channels: i,
        out_channels: o,
        dilation_rates: rates.to_vec(),
        ..BlockConfig::default()
    };
    let pointwise = |b: &mut ParamBuilder, name: &str, i, o| WasrBlock::Pointwise(Conv2d::pointwise(&mut b.sub(name), "conv", i, o, true));

    let aspp1 = if cfg.replaced("aspp1") {
        pointwise(b, "aspp1", taps[3], a1)
    } else {
        WasrBlock::Aspp(Aspp::new(&mut b.sub("aspp1"), &aspp_cfg(taps[3], a1, &[6, 12, 18]))?)
    };
    summary.push(row("aspp1", taps[3], a1, strides[3]));

    let c1 = taps[3] + 1;
    let carm1 = if cfg.replaced("carm1") {
        WasrBlock::ChannelWise(ChannelWise::new(&mut b.sub("carm1"), "conv", c1))
    } else {
        let mut carm = Carm::new(&mut b.sub("carm1"), c1);
        carm.imu_channel = Some(taps[3]);
        WasrBlock::Arm { carm, proj: None }
    };
    summary.push(row("carm1", c1, c1, strides[3]));

    let ffm = if cfg.replaced("ffm") {
        pointwise(b, "ffm", c1 + a1, f)
    } else {
        WasrBlock::Ffm(Ffm::new(&mut b.sub("ffm"), &BlockConfig::new(c1 + a1, f))?)
    };
    summary.push(row("ffm", c1 + a1, f, strides[3]));

    let c2 = taps[1] + 1;
    let carm2 = if cfg.replaced("carm2") {
        pointwise(b, "carm2", c2, f)
    } else {
        let mut sb = b.sub("carm2");
        let mut carm = Carm::new(&mut sb, c2);
        carm.imu_channel = Some(taps[1]);
        let proj = Conv2d::pointwise(&mut sb, "proj", c2, f, true);
        WasrBlock::Arm { carm, proj: Some(proj) }
    };
    summary.push(row("carm2", c2, f, strides[1]));

    let c3 = taps[0] + 1 + f;
    let ffm1 = if cfg.replaced("ffm1") {
        pointwise(b, "ffm1", c3, f)
    } else {
        WasrBlock::Ffm(Ffm::new(&mut b.sub("ffm1"), &BlockConfig { norm_epsilon: eps, ..BlockConfig::new(c3, f) })?)
    };
    summary.push(row("ffm1", c3, f, strides[0]));

    let aspp = if cfg.replaced("aspp") {
        pointwise(b, "aspp", f, NUM_CLASSES)
    } else {
        WasrBlock::Aspp(Aspp::new(&mut b.sub("aspp"), &aspp_cfg(f, NUM_CLASSES, &[6, 12, 18, 24]))?)
    };
    summary.push(row("aspp", f, NUM_CLASSES, strides[0]));

    Ok(WasrDecoder {
        aspp1,
        carm1,
        ffm,
        carm2,
        ffm1,
        aspp,
    })
}

fn wasr_forward(d: &WasrDecoder, g: &mut Graph, ps: &ParamStore, taps: &[Var], imu: &Tensor) -> Result<Var> {
    let s1 = g.shape(taps[0]);
    let s2 = g.shape(taps[1]);
    let s4 = g.shape(taps[3]);
    let imu4 = imu_input(g, imu, s4.h, s4.w);
    let imu2 = imu_input(g, imu, s2.h, s2.w);
    let imu1 = imu_input(g, imu, s1.h, s1.w);

    let a1 = g.scoped("aspp1", |g| d.aspp1.forward(g, ps, &[taps[3]]))?;
    let r1 = g.scoped("carm1", |g| d.carm1.forward(g, ps, &[taps[3], imu4]))?;
    let deep = g.scoped("ffm", |g| d.ffm.forward(g, ps, &[r1, a1]))?;
    let r2 = g.scoped("carm2", |g| d.carm2.forward(g, ps, &[taps[1], imu2]))?;
    let deep = g.bilinear(deep, s2.h, s2.w);
    let mid = g.add(deep, r2)?;
    let mid = g.bilinear(mid, s1.h, s1.w);
    let fused = g.scoped("ffm1", |g| d.ffm1.forward(g, ps, &[taps[0], imu1, mid]))?;
    let logits = g.scoped("aspp", |g| d.aspp.forward(g, ps, &[fused]))?;
    g.scoped("head", |g| {
        let p = g.softmax_channels(logits);
        Ok(g.bilinear(p, imu.shape().h, imu.shape().w))
    })
}
