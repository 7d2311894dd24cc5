mod common;

use common::eval_oracle::*;
use ewasr::data::{synth_scene, FrameAnnotation, Obstacle};
use ewasr::eval::*;
use ewasr::losses::{OBSTACLE, WATER};
use ewasr::par;

#[test]
fn matches_brute_force_oracle_on_200_frames() {
    let cfg = EvalConfig::default();
    let fr = frames(200);
    let (mut fp_seen, mut fn_seen, mut tp_seen) = (0, 0, 0);
    let mut pooled = (0.0, 0u64);
    for (_, pred, ann) in &fr {
        let got = match_frame(pred, ann, &cfg).unwrap();
        assert_eq!(got, oracle_counts(pred, ann, &cfg));
        let (sum, cols) = oracle_edge(pred, ann);
        let e = water_edge_error(&extract_water_edge(pred, H, W), &ann.water_edge, H);
        assert_eq!((e.sum_sq, e.columns), (sum, cols));
        assert_eq!(
            water_edge_rmse(&extract_water_edge(pred, H, W), &ann.water_edge, H),
            (sum / cols as f64).sqrt()
        );
        pooled.0 += sum;
        pooled.1 += cols;
        fp_seen += got.overall.fp;
        fn_seen += got.overall.fn_;
        tp_seen += got.overall.tp;
    }
    // The corruption model must exercise every outcome.
    assert!(fp_seen > 0 && fn_seen > 0 && tp_seen > 0);
    let refs: Vec<(&str, &[u8], &FrameAnnotation)> = fr.iter().map(|(i, p, a)| (i.as_str(), p.as_slice(), a)).collect();
    let rep = evaluate(&refs, &cfg).unwrap();
    assert_eq!(rep.water_edge_rmse, (pooled.0 / pooled.1 as f64).sqrt());
}

#[test]
fn ground_truth_as_prediction_is_perfect() {
    let fr: Vec<_> = (0..40).map(|i| synth_scene(5, i, H, W)).collect();
    let refs: Vec<(&str, &[u8], &FrameAnnotation)> = fr
        .iter()
        .map(|s| (s.id.as_str(), s.labels.as_slice(), s.annotation.as_ref().unwrap()))
        .collect();
    let rep = evaluate(&refs, &EvalConfig::default()).unwrap();
    assert!(rep.counts.overall.tp > 0);
    assert_eq!(rep.counts.overall.fp, 0);
    assert_eq!(rep.counts.overall.fn_, 0);
    assert_eq!(rep.overall.f1, 1.0);
    assert_eq!(rep.water_edge_rmse, 0.0);
}

#[test]
fn empty_predictions_have_zero_recall() {
    let fr: Vec<_> = (0..20).map(|i| synth_scene(5, i, H, W)).collect();
    let empty = vec![WATER; H * W];
    let refs: Vec<(&str, &[u8], &FrameAnnotation)> = fr
        .iter()
        .map(|s| (s.id.as_str(), empty.as_slice(), s.annotation.as_ref().unwrap()))
        .collect();
    let rep = evaluate(&refs, &EvalConfig::default()).unwrap();
    assert!(rep.counts.overall.fn_ > 0);
    assert_eq!(rep.overall.recall, 0.0);
}

#[test]
fn aggregation_is_additive_and_order_independent() {
    let cfg = EvalConfig::default();
    let fr = frames(30);
    let reports: Vec<FrameReport> = fr
        .iter()
        .map(|(id, p, a)| evaluate_frame(id, p, a, &cfg).unwrap())
        .collect();
    let all = aggregate(reports.clone(), &cfg);
    let a = aggregate(reports[..11].to_vec(), &cfg);
    let b = aggregate(reports[11..].to_vec(), &cfg);
    let mut sum = a.counts;
    sum.add(&b.counts);
    assert_eq!(sum, all.counts);
    let mut rev = reports;
    rev.reverse();
    let r = aggregate(rev, &cfg);
    assert_eq!(r.counts, all.counts);
    assert_eq!(r.overall, all.overall);
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let cfg = EvalConfig::default();
    let fr = frames(24);
    let refs: Vec<(&str, &[u8], &FrameAnnotation)> = fr.iter().map(|(i, p, a)| (i.as_str(), p.as_slice(), a)).collect();
    let par_rep = par::with_parallel(true, || evaluate(&refs, &cfg).unwrap());
    let seq_rep = par::with_parallel(false, || evaluate(&refs, &cfg).unwrap());
    assert_eq!(par_rep, seq_rep);
}

fn water_frame(h: usize, w: usize) -> FrameAnnotation {
    FrameAnnotation {
        width: w,
        height: h,
        water_edge: (0..w).map(|c| [c, 2]).collect(),
        obstacles: vec![],
        danger_zone_row: 10,
        horizon: None,
    }
}

#[test]
fn blob_area_threshold_and_danger_centroid() {
    let (h, w) = (16, 16);
    let ann = water_frame(h, w);
    let mut pred = vec![WATER; h * w];
    // 24-pixel blob (4x6) in rows 4..8: too small.
    for r in 4..8 {
        for c in 0..6 {
            pred[r * w + c] = OBSTACLE;
        }
    }
    let cfg = EvalConfig::default();
    assert_eq!(match_frame(&pred, &ann, &cfg).unwrap().overall.fp, 0);
    pred[8 * w] = OBSTACLE;
    let c = match_frame(&pred, &ann, &cfg).unwrap();
    assert_eq!((c.overall.fp, c.danger.fp), (1, 0));
    // A 5x5 blob centred on row 12 counts in the danger zone too.
    for r in 10..15 {
        for col in 10..15 {
            pred[r * w + col] = OBSTACLE;
        }
    }
    let c = match_frame(&pred, &ann, &cfg).unwrap();
    assert_eq!((c.overall.fp, c.danger.fp), (2, 1));
}

#[test]
fn blobs_touching_boxes_or_above_the_edge_are_ignored() {
    let (h, w) = (16, 16);
    let mut ann = water_frame(h, w);
    ann.water_edge = (0..w).map(|c| [c, 6]).collect();
    ann.obstacles.push(Obstacle {
        bbox: [0, 7, 2, 2],
        danger_zone: false,
    });
    let mut pred = vec![WATER; h * w];
    for r in 0..6 {
        for c in 8..16 {
            pred[r * w + c] = OBSTACLE;
        }
    }
    for r in 7..12 {
        for c in 0..7 {
            pred[r * w + c] = OBSTACLE;
        }
    }
    let c = match_frame(&pred, &ann, &EvalConfig::default()).unwrap();
    assert_eq!(c.overall, Counts::new(1, 0, 0));
}

#[test]
fn rejects_mismatched_sizes_and_bad_config() {
    let ann = water_frame(8, 8);
    assert!(match_frame(&[WATER; 10], &ann, &EvalConfig::default()).is_err());
    let bad = EvalConfig {
        coverage_threshold: 0.0,
        ..EvalConfig::default()
    };
    assert!(evaluate(&[], &bad).is_err());
}

#[test]
fn zero_frames_are_degenerate() {
    let rep = evaluate(&[], &EvalConfig::default()).unwrap();
    assert!(rep.degenerate);
    assert_eq!(rep.counts, DetectionCounts::default());
    assert_eq!((rep.overall.precision, rep.overall.recall), (1.0, 1.0));
    assert_eq!(rep.summary_row().split(',').count(), MetricsReport::summary_header().split(',').count());
}
