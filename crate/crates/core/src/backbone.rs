//! ResNet encoders with multi-scale feature taps.
//!
//! Parameter names follow the torchvision layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, `layer2.0.downsample.0`, `fc`, ...), so converted
//! ImageNet checkpoints load by name.

use serde::{Deserialize, Serialize};

use crate::blocks::{BatchNorm2d, Conv2d, FeatureMap};
use crate::error::{config_err, shape_err, validation_err, Result};
use crate::graph::{Graph, Mode, Var};
use crate::kernels::ConvGeom;
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    /// ResNet-18: basic blocks `[2, 2, 2, 2]`, widths `[64, 128, 256, 512]`.
    Resnet18,
    /// ResNet-18 layout with one block per stage and widths `[8, 16, 32, 64]`.
    Tiny,
    /// ResNet-101 with the last two stages dilated (output stride 8).
    Resnet101Dilated,
}

impl BackbonePreset {
    pub fn name(self) -> &'static str {
        match self {
            BackbonePreset::Resnet18 => "resnet18",
            BackbonePreset::Tiny => "tiny",
            BackbonePreset::Resnet101Dilated => "resnet101_dilated",
        }
    }

    fn layout(self) -> Layout {
        match self {
            BackbonePreset::Resnet18 => Layout {
                bottleneck: false,
                stem: 64,
                depths: [2, 2, 2, 2],
                widths: [64, 128, 256, 512],
                strides: [1, 2, 2, 2],
                dilations: [1, 1, 1, 1],
            },
            BackbonePreset::Tiny => Layout {
                bottleneck: false,
                stem: 8,
                depths: [1, 1, 1, 1],
                widths: [8, 16, 32, 64],
                strides: [1, 2, 2, 2],
                dilations: [1, 1, 1, 1],
            },
            BackbonePreset::Resnet101Dilated => Layout {
                bottleneck: true,
                stem: 64,
                depths: [3, 4, 23, 3],
                widths: [64, 128, 256, 512],
                strides: [1, 2, 1, 1],
                dilations: [1, 1, 2, 4],
            },
        }
    }

    /// Channels of the four stage outputs.
    pub fn tap_channels(self) -> [usize; 4] {
        let l = self.layout();
        l.widths.map(|w| w * l.expansion())
    }

    /// Downsampling factors of the four stage outputs.
    pub fn tap_strides(self) -> [usize; 4] {
        let l = self.layout();
        let mut s = 4;
        let mut out = [0; 4];
        for (o, st) in out.iter_mut().zip(l.strides) {
            s *= st;
            *o = s;
        }
        out
    }
}

impl std::str::FromStr for BackbonePreset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Self::Resnet18),
            "tiny" => Ok(Self::Tiny),
            "resnet101_dilated" => Ok(Self::Resnet101Dilated),
            _ => Err(config_err!("unknown backbone preset {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    bottleneck: bool,
    stem: usize,
    depths: [usize; 4],
    widths: [usize; 4],
    strides: [usize; 4],
    dilations: [usize; 4],
}

impl Layout {
    fn expansion(&self) -> usize {
        if self.bottleneck {
            4
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvNorm {
    fn new(b: &mut ParamBuilder, conv: &str, bn: &str, in_c: usize, out_c: usize, geom: ConvGeom) -> Self {
        Self {
            conv: Conv2d::new(b, conv, in_c, out_c, geom, false),
            bn: BatchNorm2d::new(b, bn, out_c, EPS),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        self.bn.forward(g, ps, y)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    body: Vec<ConvNorm>,
    downsample: Option<ConvNorm>,
}

impl ResBlock {
    fn new(b: &mut ParamBuilder, layout: &Layout, in_c: usize, width: usize, stride: usize, dilation: usize) -> Self {
        let out_c = width * layout.expansion();
        let mut body = Vec::new();
        if layout.bottleneck {
            body.push(ConvNorm::new(b, "conv1", "bn1", in_c, width, ConvGeom::pointwise()));
            body.push(ConvNorm::new(
                b,
                "conv2",
                "bn2",
                width,
                width,
                ConvGeom::new(3, stride, dilation, dilation),
            ));
            body.push(ConvNorm::new(b, "conv3", "bn3", width, out_c, ConvGeom::pointwise()));
        } else {
            body.push(ConvNorm::new(
                b,
                "conv1",
                "bn1",
                in_c,
                width,
                ConvGeom::new(3, stride, dilation, dilation),
            ));
            body.push(ConvNorm::new(b, "conv2", "bn2", width, out_c, ConvGeom::same(3, dilation)));
        }
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            let mut d = b.sub("downsample");
            ConvNorm::new(&mut d, "0", "1", in_c, out_c, ConvGeom::new(1, stride, 0, 1))
        });
        Self { body, downsample }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.body.len() - 1;
        for (i, cn) in self.body.iter().enumerate() {
            y = cn.forward(g, ps, y)?;
            if i != last {
                y = g.relu(y);
            }
        }
        let shortcut = match &self.downsample {
            Some(d) => d.forward(g, ps, x)?,
            None => x,
        };
        let y = g.add(y, shortcut)?;
        Ok(g.relu(y))
    }
}

/// Feature maps of the four encoder stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSet {
    pub features: Vec<FeatureMap>,
}

impl TapSet {
    /// Strides must be non-decreasing; dilated encoders repeat a stride.
    pub fn new(features: Vec<FeatureMap>) -> Result<Self> {
        if features.is_empty() {
            return Err(shape_err!("tap set needs at least one feature map"));
        }
        if features.windows(2).any(|w| w[1].stride() < w[0].stride()) {
            return Err(shape_err!("tap strides must be non-decreasing"));
        }
        Ok(Self { features })
    }

    pub fn channels(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.channels()).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.stride()).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.channels().iter().sum()
    }
}

/// A ResNet encoder exposing its stage outputs.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub preset: BackbonePreset,
    stem: ConvNorm,
    stages: Vec<Vec<ResBlock>>,
    classifier: Option<Conv2d>,
}

impl Backbone {
    /// Builds the encoder. With `classes`, an ImageNet-style linear
    /// classifier (`fc`) is added on top; it is only used by
    /// [`Backbone::classify`] and never by the segmentation models.
    pub fn new(b: &mut ParamBuilder, preset: BackbonePreset, classes: Option<usize>) -> Self {
        let layout = preset.layout();
        let stem = ConvNorm::new(b, "conv1", "bn1", 3, layout.stem, ConvGeom::new(7, 2, 3, 1));
        let mut in_c = layout.stem;
        let mut stages = Vec::new();
        for s in 0..4 {
            let mut sb = b.sub(&format!("layer{}", s + 1));
            let mut blocks = Vec::new();
            for i in 0..layout.depths[s] {
                let stride = if i == 0 { layout.strides[s] } else { 1 };
                let mut bb = sb.sub(&i.to_string());
                blocks.push(ResBlock::new(&mut bb, &layout, in_c, layout.widths[s], stride, layout.dilations[s]));
                in_c = layout.widths[s] * layout.expansion();
            }
            stages.push(blocks);
        }
        let classifier = classes.map(|k| Conv2d::pointwise(b, "fc", in_c, k, true));
        Self {
            preset,
            stem,
            stages,
            classifier,
        }
    }

    pub fn tap_channels(&self) -> [usize; 4] {
        self.preset.tap_channels()
    }

    pub fn tap_strides(&self) -> [usize; 4] {
        self.preset.tap_strides()
    }

    /// Appends the encoder to `g`; returns the four stage outputs. Each
    /// stage runs in its own scope (`stem`, `layer1` .. `layer4`).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(validation_err!("encoder expects 3-channel images, got {s}"));
        }
        if !s.h.is_multiple_of(INPUT_MULTIPLE) || !s.w.is_multiple_of(INPUT_MULTIPLE) || s.h == 0 || s.w == 0 {
            return Err(validation_err!(
                "input {}x{} is not divisible by {INPUT_MULTIPLE}",
                s.h,
                s.w
            ));
        }
        let mut x = g.scoped("stem", |g| -> Result<Var> {
            let y = self.stem.forward(g, ps, image)?;
            let y = g.relu(y);
            g.max_pool_3s2(y)
        })?;
        let mut taps = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            x = g.scoped(&format!("layer{}", i + 1), |g| {
                stage.iter().try_fold(x, |x, block| block.forward(g, ps, x))
            })?;
            taps.push(x);
        }
        Ok(taps)
    }

    /// Global-average-pooled class logits from the last stage output.
    pub fn classify(&self, g: &mut Graph, ps: &ParamStore, last: Var) -> Result<Var> {
        let fc = self
            .classifier
            .as_ref()
            .ok_or_else(|| config_err!("backbone was built without a classifier"))?;
        g.scoped("fc", |g| {
            let pooled = g.global_avg_pool(last);
            fc.forward(g, ps, pooled)
        })
    }

    /// Runs the encoder in evaluation mode on a `[1, 3, H, W]` image.
    pub fn extract_features(&self, ps: &ParamStore, image: &Tensor) -> Result<TapSet> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(image.clone());
        let taps = self.forward(&mut g, ps, x)?;
        let features = taps
            .iter()
            .zip(self.tap_strides())
            .map(|(&t, s)| FeatureMap::new(g.value(t).clone(), s))
            .collect::<Result<Vec<_>>>()?;
        TapSet::new(features)
    }
}

/// Average-pools every tap to the resolution of the coarsest one and
/// concatenates along channels. `strides` must be non-decreasing.
pub fn concat_at_coarsest(g: &mut Graph, taps: &[Var], strides: &[usize]) -> Result<Var> {
    let last = *strides.last().ok_or_else(|| shape_err!("no taps to concatenate"))?;
    let pooled = taps
        .iter()
        .zip(strides)
        .map(|(&t, &s)| {
            if last % s != 0 {
                return Err(shape_err!("tap stride {s} does not divide {last}"));
            }
            g.avg_pool(t, last / s)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&pooled)
}

/// Resizes all taps to the coarsest stride and concatenates them.
pub fn multi_scale_concat(taps: &TapSet) -> Result<FeatureMap> {
    if taps.features.len() == 1 {
        return Ok(taps.features[0].clone());
    }
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = taps.features.iter().map(|f| g.input(f.tensor().clone())).collect();
    let strides = taps.strides();
    let y = concat_at_coarsest(&mut g, &vars, &strides)?;
    FeatureMap::new(g.value(y).clone(), *strides.last().expect("non-empty"))
}

/// Per-tap 1×1 projections halving the channel count (rounding up).
#[derive(Clone, Debug)]
pub struct ChannelReducer {
    pub convs: Vec<Conv2d>,
}

impl ChannelReducer {
    pub fn new(b: &mut ParamBuilder, channels: &[usize]) -> Self {
        let convs = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(b, &i.to_string(), c, c.div_ceil(2), true))
            .collect();
        Self { convs }
    }

    pub fn out_channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_channels).collect()
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, taps: &[Var]) -> Result<Vec<Var>> {
        if taps.len() != self.convs.len() {
            return Err(config_err!("{} reducers for {} taps", self.convs.len(), taps.len()));
        }
        taps.iter().zip(&self.convs).map(|(&t, c)| c.forward(g, ps, t)).collect()
    }
}

/// Applies `reducer` to every tap, or returns the taps unchanged.
pub fn reduce_channels(ps: &ParamStore, reducer: Option<&ChannelReducer>, taps: &TapSet) -> Result<TapSet> {
    let Some(reducer) = reducer else {
        return Ok(taps.clone());
    };
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = taps.features.iter().map(|f| g.input(f.tensor().clone())).collect();
    let out = reducer.forward(&mut g, ps, &vars)?;
    let features = out
        .iter()
        .zip(&taps.features)
        .map(|(&v, f)| FeatureMap::new(g.value(v).clone(), f.stride()))
        .collect::<Result<Vec<_>>>()?;
    TapSet::new(features)
}
