//! Water-edge accuracy and obstacle detection metrics (TP/FP/FN, Pr/Re/F1)
//! overall and inside the danger zone.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::FrameAnnotation;
use crate::error::{config_err, shape_err, Result};
use crate::losses::{OBSTACLE, WATER};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum fraction of a box covered by predicted obstacle pixels for a
    /// true positive.
    pub coverage_threshold: f64,
    /// Smallest false-positive blob, in pixels.
    pub min_blob_area: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            coverage_threshold: 0.5,
            min_blob_area: 25,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(config_err!("coverage_threshold must lie in (0, 1], got {}", self.coverage_threshold));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub overall: Counts,
    pub danger: Counts,
}

impl DetectionCounts {
    pub fn add(&mut self, o: &DetectionCounts) {
        self.overall.add(&o.overall);
        self.danger.add(&o.danger);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall are 1 when their denominator is 0; F1 is 0 when
/// both are 0.
pub fn scores(c: &Counts) -> Scores {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores { precision, recall, f1 }
}

// ----- water edge ------------------------------------------------------------

/// Topmost water row of every column; `None` for columns without water.
pub fn extract_water_edge(mask: &[u8], height: usize, width: usize) -> Vec<Option<usize>> {
    (0..width)
        .map(|c| (0..height).find(|&r| mask[r * width + c] == WATER))
        .collect()
}

/// Squared water-edge error accumulated over ground-truth columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeError {
    pub sum_sq: f64,
    pub columns: u64,
}

impl EdgeError {
    pub fn rmse(&self) -> f64 {
        if self.columns == 0 {
            0.0
        } else {
            (self.sum_sq / self.columns as f64).sqrt()
        }
    }
}

/// Vertical error at every ground-truth column. A column where the
/// prediction has no water counts as an edge at the image bottom
/// (`row = height`).
pub fn water_edge_error(pred: &[Option<usize>], gt: &[[usize; 2]], height: usize) -> EdgeError {
    let mut e = EdgeError::default();
    for &[c, r] in gt {
        let p = pred.get(c).copied().flatten().unwrap_or(height);
        let d = p as f64 - r as f64;
        e.sum_sq += d * d;
        e.columns += 1;
    }
    e
}

pub fn water_edge_rmse(pred: &[Option<usize>], gt: &[[usize; 2]], height: usize) -> f64 {
    water_edge_error(pred, gt, height).rmse()
}

// ----- detection ---------------------------------------------------------------

/// A connected set of predicted obstacle pixels below the water edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub area: usize,
    pub centroid_row: f64,
    pub centroid_col: f64,
    pub touches_box: bool,
}

/// 8-connected components of predicted obstacle pixels lying strictly below
/// the ground-truth water edge. Columns without an edge sample are skipped.
pub fn water_blobs(pred: &[u8], ann: &FrameAnnotation) -> Vec<Blob> {
    let (h, w) = (ann.height, ann.width);
    let mut edge = vec![None; w];
    for &[c, r] in &ann.water_edge {
        edge[c] = Some(r);
    }
    let candidate = |r: usize, c: usize| pred[r * w + c] == OBSTACLE && edge[c].is_some_and(|e| r > e);
    let mut seen = vec![false; h * w];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let (sr, sc) = (start / w, start % w);
        if seen[start] || !candidate(sr, sc) {
            continue;
        }
        seen[start] = true;
        queue.push_back((sr, sc));
        let (mut area, mut sum_r, mut sum_c, mut touches) = (0usize, 0usize, 0usize, false);
        while let Some((r, c)) = queue.pop_front() {
            area += 1;
            sum_r += r;
            sum_c += c;
            touches |= ann.obstacles.iter().any(|o| o.contains(r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    let i = nr * w + nc;
                    if !seen[i] && candidate(nr, nc) {
                        seen[i] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
        blobs.push(Blob {
            area,
            centroid_row: sum_r as f64 / area as f64,
            centroid_col: sum_c as f64 / area as f64,
            touches_box: touches,
        });
    }
    blobs
}

/// Fraction of the box covered by predicted obstacle pixels.
pub fn box_coverage(pred: &[u8], width: usize, bbox: [usize; 4]) -> f64 {
    let [x, y, bw, bh] = bbox;
    let covered = (y..y + bh)
        .flat_map(|r| (x..x + bw).map(move |c| (r, c)))
        .filter(|&(r, c)| pred[r * width + c] == OBSTACLE)
        .count();
    covered as f64 / (bw * bh) as f64
}

/// Detection counts of one frame.
pub fn match_frame(pred: &[u8], ann: &FrameAnnotation, cfg: &EvalConfig) -> Result<DetectionCounts> {
    if pred.len() != ann.height * ann.width {
        return Err(shape_err!(
            "prediction of {} pixels for a {}x{} annotation",
            pred.len(),
            ann.width,
            ann.height
        ));
    }
    ann.validate()?;
    let mut out = DetectionCounts::default();
    for o in &ann.obstacles {
        let hit = box_coverage(pred, ann.width, o.bbox) >= cfg.coverage_threshold;
        let scopes: &mut [&mut Counts] = if o.danger_zone {
            &mut [&mut out.overall, &mut out.danger]
        } else {
            &mut [&mut out.overall]
        };
        for c in scopes.iter_mut() {
            if hit {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
    }
    for b in water_blobs(pred, ann) {
        if b.touches_box || b.area < cfg.min_blob_area {
            continue;
        }
        out.overall.fp += 1;
        if b.centroid_row >= ann.danger_zone_row as f64 {
            out.danger.fp += 1;
        }
    }
    Ok(out)
}

// ----- reports -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub id: String,
    pub counts: DetectionCounts,
    pub edge: EdgeError,
    pub water_edge_rmse: f64,
}

/// Evaluates one predicted label mask against its annotation.
pub fn evaluate_frame(id: &str, pred: &[u8], ann: &FrameAnnotation, cfg: &EvalConfig) -> Result<FrameReport> {
    let counts = match_frame(pred, ann, cfg)?;
    let edge = water_edge_error(&extract_water_edge(pred, ann.height, ann.width), &ann.water_edge, ann.height);
    Ok(FrameReport {
        id: id.to_string(),
        counts,
        water_edge_rmse: edge.rmse(),
        edge,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub frames: usize,
    /// Set when no frame was evaluated; scores then follow the
    /// empty-denominator convention.
    pub degenerate: bool,
    /// RMSE pooled over all ground-truth columns of all frames.
    pub water_edge_rmse: f64,
    pub counts: DetectionCounts,
    pub overall: Scores,
    pub danger: Scores,
    pub per_frame: Vec<FrameReport>,
}

/// Sums per-frame results; the fold is order-independent.
pub fn aggregate(frames: Vec<FrameReport>, cfg: &EvalConfig) -> MetricsReport {
    let mut counts = DetectionCounts::default();
    let mut edge = EdgeError::default();
    for f in &frames {
        counts.add(&f.counts);
        edge.sum_sq += f.edge.sum_sq;
        edge.columns += f.edge.columns;
    }
    MetricsReport {
        config: cfg.clone(),
        frames: frames.len(),
        degenerate: frames.is_empty(),
        water_edge_rmse: edge.rmse(),
        overall: scores(&counts.overall),
        danger: scores(&counts.danger),
        counts,
        per_frame: frames,
    }
}

/// Evaluates frames in parallel and aggregates them in input order.
pub fn evaluate<'a>(
    frames: &[(&'a str, &'a [u8], &'a FrameAnnotation)],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let reports = par::map(frames.len(), |i| {
        let (id, pred, ann) = frames[i];
        evaluate_frame(id, pred, ann, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(reports, cfg))
}

impl MetricsReport {
    pub fn summary_header() -> &'static str {
        "frames,we_rmse,tp,fp,fn,pr,re,f1,danger_tp,danger_fp,danger_fn,danger_pr,danger_re,danger_f1"
    }

    /// One comma-separated summary row matching [`Self::summary_header`].
    pub fn summary_row(&self) -> String {
        let (o, d) = (&self.counts.overall, &self.counts.danger);
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.4},{},{},{},{:.4},{:.4},{:.4},{},{},{},{:.4},{:.4},{:.4}",
            self.frames,
            self.water_edge_rmse,
            o.tp,
            o.fp,
            o.fn_,
            self.overall.precision,
            self.overall.recall,
            self.overall.f1,
            d.tp,
            d.fp,
            d.fn_,
            self.danger.precision,
            self.danger.recall,
            self.danger.f1
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Obstacle;

    #[test]
    fn formula_examples() {
        let s = scores(&Counts::new(3, 1, 0));
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 6.0 / 7.0).abs() < 1e-12);
        let e = scores(&Counts::default());
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn full_cover_is_true_positive() {
        let (h, w) = (8, 8);
        let mut pred = vec![WATER; h * w];
        for r in 2..4 {
            for c in 2..5 {
                pred[r * w + c] = OBSTACLE;
            }
        }
        let ann = FrameAnnotation {
            width: w,
            height: h,
            water_edge: (0..w).map(|c| [c, 0]).collect(),
            obstacles: vec![Obstacle {
                bbox: [2, 2, 3, 2],
                danger_zone: false,
            }],
            danger_zone_row: 6,
            horizon: None,
        };
        let c = match_frame(&pred, &ann, &EvalConfig::default()).unwrap();
        assert_eq!(c.overall, Counts::new(1, 0, 0));
        let empty = vec![WATER; h * w];
        assert_eq!(match_frame(&empty, &ann, &EvalConfig::default()).unwrap().overall, Counts::new(0, 0, 1));
    }

    #[test]
    fn edge_offsets() {
        let gt: Vec<[usize; 2]> = (0..4).map(|c| [c, 5]).collect();
        let pred = vec![Some(8); 4];
        assert_eq!(water_edge_rmse(&pred, &gt, 10), 3.0);
        assert_eq!(water_edge_rmse(&[None; 4], &gt, 10), 5.0);
    }
}
