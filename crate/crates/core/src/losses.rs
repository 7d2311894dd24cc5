//! Segmentation and feature-separation objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, validation_err, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const OBSTACLE: u8 = 0;
pub const WATER: u8 = 1;
pub const SKY: u8 = 2;
pub const IGNORE: u8 = 4;

/// Added to the separation denominator so that it is never zero.
pub const SEPARATION_EPS: f64 = 1e-6;

/// Smallest probability fed to `ln` in the focal loss.
const MIN_PROB: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub separation_weight: f64,
    pub weight_decay: f64,
    pub ignore_label: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            separation_weight: 0.01,
            weight_decay: 1e-6,
            ignore_label: IGNORE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.focal_gamma) {
            return Err(config_err!("focal_gamma must be >= 0"));
        }
        if !finite_nonneg(self.focal_alpha) || !finite_nonneg(self.separation_weight) || !finite_nonneg(self.weight_decay) {
            return Err(config_err!("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
    /// Set when no pixel contributed (the value is then 0 by definition).
    pub empty: bool,
}

fn check_labels(labels: &[u8], shape: Shape, ignore: u8) -> Result<()> {
    if labels.len() != shape.n * shape.hw() {
        return Err(shape_err!("{} labels for predictions {shape}", labels.len()));
    }
    if let Some(v) = labels.iter().find(|&&l| l > SKY && l != ignore) {
        return Err(validation_err!("label {v} outside {{0, 1, 2, {ignore}}}"));
    }
    Ok(())
}

/// Mean over non-ignored pixels of `-α (1 - p_t)^γ ln p_t`.
///
/// `probs` is `[n, 3, H, W]`; `labels` holds `n·H·W` class indices in
/// row-major order.
pub fn focal_loss(probs: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    let s = probs.shape();
    if s.c != 3 {
        return Err(shape_err!("focal loss expects 3 class channels, got {s}"));
    }
    check_labels(labels, s, cfg.ignore_label)?;
    let (a, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    let hw = s.hw();
    let mut grad = Tensor::zeros(s);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == cfg.ignore_label {
            continue;
        }
        let (n, p) = (i / hw, i % hw);
        let idx = (n * 3 + l as usize) * hw + p;
        let pt = probs.data()[idx].clamp(MIN_PROB, 1.0);
        let q = 1.0 - pt;
        let lnp = pt.ln();
        sum += -a * q.powf(gamma) * lnp;
        // d/dp of -a q^γ ln p = a γ q^(γ-1) ln p - a q^γ / p
        let d_mod = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            a * gamma * q.powf(gamma - 1.0) * lnp
        };
        grad.data_mut()[idx] = d_mod - a * q.powf(gamma) / pt;
        count += 1;
    }
    if count == 0 {
        log::warn!("focal loss over an empty pixel set");
        return Ok(LossValue {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let inv = 1.0 / count as f64;
    grad.scale(inv);
    Ok(LossValue {
        value: sum * inv,
        grad,
        empty: false,
    })
}

/// Nearest-neighbour downsampling of a label map, using the same sampling
/// grid as the IMU resize: output `(y, x)` reads input
/// `(y·H/h, x·W/w)`.
pub fn downsample_labels(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let iy = y * h / oh;
        for x in 0..ow {
            out.push(labels[iy * w + x * w / ow]);
        }
    }
    out
}

/// Water–obstacle separation surrogate on encoder features:
/// `σ²_w / (σ²_w + d²_min + ε)`, averaged over the samples that contain
/// both water and obstacle pixels.
///
/// `σ²_w` is the mean per-channel variance of water-pixel features and
/// `d²_min` the smallest squared distance from an obstacle-pixel feature
/// to the water mean. `labels` are at image resolution `image_hw` and are
/// downsampled to the feature grid.
pub fn separation_loss(features: &Tensor, labels: &[u8], image_hw: (usize, usize)) -> Result<LossValue> {
    let s = features.shape();
    let (ih, iw) = image_hw;
    if labels.len() != s.n * ih * iw {
        return Err(shape_err!("{} labels for {} images of {ih}x{iw}", labels.len(), s.n));
    }
    let hw = s.hw();
    let mut grad = Tensor::zeros(s);
    let mut terms = Vec::new();
    for n in 0..s.n {
        let lab = downsample_labels(&labels[n * ih * iw..(n + 1) * ih * iw], ih, iw, s.h, s.w);
        let water: Vec<usize> = (0..hw).filter(|&p| lab[p] == WATER).collect();
        let obstacle: Vec<usize> = (0..hw).filter(|&p| lab[p] == OBSTACLE).collect();
        if water.is_empty() || obstacle.is_empty() {
            continue;
        }
        let f = features.sample(n);
        let at = |c: usize, p: usize| f[c * hw + p];
        let nw = water.len() as f64;
        let mu: Vec<f64> = (0..s.c).map(|c| water.iter().map(|&p| at(c, p)).sum::<f64>() / nw).collect();
        let var = (0..s.c)
            .map(|c| water.iter().map(|&p| (at(c, p) - mu[c]).powi(2)).sum::<f64>() / nw)
            .sum::<f64>()
            / s.c as f64;
        let dist = |p: usize| (0..s.c).map(|c| (at(c, p) - mu[c]).powi(2)).sum::<f64>();
        let (o_min, d2) = obstacle
            .iter()
            .map(|&p| (p, dist(p)))
            .fold((obstacle[0], f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let denom = var + d2 + SEPARATION_EPS;
        terms.push((n, var / denom));
        let dl_dvar = (d2 + SEPARATION_EPS) / (denom * denom);
        let dl_dd2 = -var / (denom * denom);
        let g = &mut grad.data_mut()[n * s.chw()..(n + 1) * s.chw()];
        for c in 0..s.c {
            let diff_o = at(c, o_min) - mu[c];
            for &p in &water {
                g[c * hw + p] += dl_dvar * 2.0 * (at(c, p) - mu[c]) / (s.c as f64 * nw) - dl_dd2 * 2.0 * diff_o / nw;
            }
            g[c * hw + o_min] += dl_dd2 * 2.0 * diff_o;
        }
    }
    if terms.is_empty() {
        return Ok(LossValue {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let k = terms.len() as f64;
    grad.scale(1.0 / k);
    Ok(LossValue {
        value: terms.iter().map(|t| t.1).sum::<f64>() / k,
        grad,
        empty: false,
    })
}

/// `weight_decay · ‖θ‖²` over all trainable parameters.
pub fn weight_decay_term(ps: &ParamStore, cfg: &LossConfig) -> f64 {
    if cfg.weight_decay == 0.0 {
        0.0
    } else {
        cfg.weight_decay * ps.trainable_sq_norm()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub separation: f64,
    pub decay: f64,
    pub total: f64,
}

/// Total objective with its gradients with respect to `probs` and
/// `features`. The decay gradient `2·wd·θ` is applied by the optimiser.
pub struct TotalLoss {
    pub parts: LossBreakdown,
    pub dprobs: Tensor,
    pub dfeatures: Tensor,
}

/// `focal + λ·separation + wd·‖θ‖²`.
pub fn total_loss(
    probs: &Tensor,
    features: &Tensor,
    labels: &[u8],
    ps: &ParamStore,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let focal = focal_loss(probs, labels, cfg)?;
    let s = probs.shape();
    let (separation, mut dfeatures) = if cfg.separation_weight > 0.0 {
        let sep = separation_loss(features, labels, (s.h, s.w))?;
        (sep.value, sep.grad)
    } else {
        (0.0, Tensor::zeros(features.shape()))
    };
    dfeatures.scale(cfg.separation_weight);
    let decay = weight_decay_term(ps, cfg);
    Ok(TotalLoss {
        parts: LossBreakdown {
            focal: focal.value,
            separation,
            decay,
            total: focal.value + cfg.separation_weight * separation + decay,
        },
        dprobs: focal.grad,
        dfeatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_from(values: &[[f64; 3]], h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
        for (p, v) in values.iter().enumerate() {
            for (c, &x) in v.iter().enumerate() {
                t.data_mut()[c * h * w + p] = x;
            }
        }
        t
    }

    #[test]
    fn single_pixel_focal_value() {
        let p = probs_from(&[[0.5, 0.25, 0.25]], 1, 1);
        let l = focal_loss(&p, &[0], &LossConfig::default()).unwrap();
        assert!((l.value - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let p = probs_from(&[[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]], 1, 2);
        let cfg = LossConfig {
            focal_gamma: 0.0,
            ..LossConfig::default()
        };
        let l = focal_loss(&p, &[0, 2], &cfg).unwrap();
        assert!((l.value - (-(0.7f64.ln()) - 0.6f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_empty() {
        let p = probs_from(&[[0.7, 0.2, 0.1]], 1, 1);
        let l = focal_loss(&p, &[IGNORE], &LossConfig::default()).unwrap();
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn rejects_unknown_labels() {
        let p = probs_from(&[[0.7, 0.2, 0.1]], 1, 1);
        assert!(focal_loss(&p, &[3], &LossConfig::default()).is_err());
    }

    #[test]
    fn labels_downsample_by_nearest() {
        let l: Vec<u8> = (0..16).map(|i| i as u8).collect();
        assert_eq!(downsample_labels(&l, 4, 4, 2, 2), vec![0, 2, 8, 10]);
    }
}
