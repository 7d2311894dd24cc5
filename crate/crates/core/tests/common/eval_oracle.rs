//! Brute-force detection and water-edge oracles over synthetic frames.

use ewasr::data::{synth_scene, FrameAnnotation};
use ewasr::eval::{Counts, DetectionCounts, EvalConfig};
use ewasr::losses::{IGNORE, OBSTACLE, SKY, WATER};
use ewasr::params::init_rng;
use rand::Rng;

pub const H: usize = 48;
pub const W: usize = 64;

/// Ground-truth mask with seeded corruptions: dropped obstacles, spurious
/// blobs of varied size, salt noise and a locally shifted water edge.
pub fn corrupted_prediction(labels: &[u8], ann: &FrameAnnotation, seed: u64) -> Vec<u8> {
    let mut rng = init_rng(seed);
    let mut p: Vec<u8> = labels.iter().map(|&l| if l == IGNORE { WATER } else { l }).collect();
    for o in &ann.obstacles {
        let [x, y, w, h] = o.bbox;
        if rng.random_bool(0.3) {
            let keep = rng.random_range(0.0..1.0);
            for r in y..y + h {
                for c in x..x + w {
                    if p[r * W + c] == OBSTACLE && rng.random::<f64>() > keep {
                        p[r * W + c] = WATER;
                    }
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let (bh, bw) = (rng.random_range(1..9), rng.random_range(1..9));
        let (r0, c0) = (rng.random_range(0..H - bh), rng.random_range(0..W - bw));
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                if rng.random_bool(0.85) {
                    p[r * W + c] = OBSTACLE;
                }
            }
        }
    }
    for v in p.iter_mut() {
        if rng.random_bool(0.01) {
            *v = [OBSTACLE, WATER, SKY][rng.random_range(0..3)];
        }
    }
    if rng.random_bool(0.5) {
        let c0 = rng.random_range(0..W - 8);
        let shift = rng.random_range(1..5);
        for c in c0..c0 + 8 {
            for r in 0..H {
                if p[r * W + c] == WATER {
                    for k in r..(r + shift).min(H) {
                        p[k * W + c] = SKY;
                    }
                    break;
                }
            }
        }
    }
    p
}

/// Detection counts by direct pixel-set arithmetic: box coverage by a full
/// image scan and blobs by iterated minimum-label propagation.
pub fn oracle_counts(pred: &[u8], ann: &FrameAnnotation, cfg: &EvalConfig) -> DetectionCounts {
    let mut out = DetectionCounts::default();
    for o in &ann.obstacles {
        let mut inside = 0usize;
        let mut covered = 0usize;
        for r in 0..H {
            for c in 0..W {
                if o.contains(r, c) {
                    inside += 1;
                    covered += usize::from(pred[r * W + c] == OBSTACLE);
                }
            }
        }
        let hit = covered as f64 / inside as f64 >= cfg.coverage_threshold;
        let bump = |k: &mut Counts| {
            if hit {
                k.tp += 1
            } else {
                k.fn_ += 1
            }
        };
        bump(&mut out.overall);
        if o.danger_zone {
            bump(&mut out.danger);
        }
    }
    let edge_row = |c: usize| ann.water_edge.iter().find(|p| p[0] == c).map(|p| p[1]);
    let cand: Vec<bool> = (0..H * W)
        .map(|i| pred[i] == OBSTACLE && edge_row(i % W).is_some_and(|e| i / W > e))
        .collect();
    let mut label: Vec<usize> = (0..H * W).collect();
    loop {
        let mut changed = false;
        for i in 0..H * W {
            if !cand[i] {
                continue;
            }
            let (r, c) = ((i / W) as i64, (i % W) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= H as i64 || nc >= W as i64 {
                        continue;
                    }
                    let j = nr as usize * W + nc as usize;
                    if cand[j] && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..H * W).filter(|&i| cand[i]).map(|i| label[i]).collect();
    roots.sort_unstable();
    roots.dedup();
    for root in roots {
        let members: Vec<usize> = (0..H * W).filter(|&i| cand[i] && label[i] == root).collect();
        let touches = members
            .iter()
            .any(|&i| ann.obstacles.iter().any(|o| o.contains(i / W, i % W)));
        if touches || members.len() < cfg.min_blob_area {
            continue;
        }
        out.overall.fp += 1;
        let mean_row = members.iter().map(|&i| (i / W) as f64).sum::<f64>() / members.len() as f64;
        if mean_row >= ann.danger_zone_row as f64 {
            out.danger.fp += 1;
        }
    }
    out
}

pub fn oracle_edge(pred: &[u8], ann: &FrameAnnotation) -> (f64, u64) {
    let mut sum = 0.0;
    for &[c, r] in &ann.water_edge {
        let rows: Vec<usize> = (0..H).filter(|&k| pred[k * W + c] == WATER).collect();
        let p = rows.iter().copied().min().unwrap_or(H);
        sum += (p as f64 - r as f64).powi(2);
    }
    (sum, ann.water_edge.len() as u64)
}

pub fn frames(n: usize) -> Vec<(String, Vec<u8>, FrameAnnotation)> {
    (0..n)
        .map(|i| {
            let s = synth_scene(2024, i, H, W);
            let ann = s.annotation.clone().unwrap();
            let pred = corrupted_prediction(&s.labels, &ann, i as u64 + 1);
            (s.id, pred, ann)
        })
        .collect()
}
