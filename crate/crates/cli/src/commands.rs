use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ewasr::backbone::BackbonePreset;
use ewasr::checkpoint::Checkpoint;
use ewasr::data::{load_dataset, read_mask, synth_generate, write_mask, SegSample};
use ewasr::eval::{evaluate, MetricsReport};
use ewasr::models::{Model, Replacement, Variant};
use ewasr::profiling::{
    channel_weight_diversity, count_config, rank_by_imu_weight, replacement_sweep, time_blocks, CostReport,
    ReplacementSweep,
};
use ewasr::train::{fit_to_dir, model_from_checkpoint, pixel_accuracy, predict_labels, RunFiles, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{emit, text_header, write_json, write_text, Envelope};
use crate::{AnalyzeArgs, CliError, Common, EvalArgs, ProfileArgs, SynthArgs, TrainArgs};

fn base_config(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(c.config.as_deref())
}

fn existing_dir(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} directory {} does not exist", p.display())))
    }
}

fn existing_file(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn load_samples(dir: &Path) -> Result<Vec<SegSample>, CliError> {
    existing_dir(dir, "dataset")?;
    let ds = load_dataset(dir, None)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds.samples)
}

/// Common image size of a dataset.
fn resolution(samples: &[SegSample]) -> Result<(usize, usize), CliError> {
    let first = samples
        .first()
        .ok_or_else(|| CliError::Runtime(ewasr::Error::EmptyDataset("no samples found".into())))?;
    let (h, w) = (first.height, first.width);
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(CliError::Usage(format!(
            "sample {} is {}x{}, expected {h}x{w}; all images must share one size",
            s.id, s.height, s.width
        )));
    }
    Ok((h, w))
}

// ----- synth ----------------------------------------------------------------

#[derive(Serialize)]
struct SynthBody<'a> {
    dataset: &'a Path,
    samples: usize,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(n) = a.n {
        cfg.synth.n = n;
    }
    if let Some(h) = a.height {
        cfg.synth.height = h;
    }
    if let Some(w) = a.width {
        cfg.synth.width = w;
    }
    let cfg = cfg.resolve(a.common.seed)?;
    cfg.synth.validate()?;
    let manifest = synth_generate(&cfg.synth, &a.out)?;
    let body = SynthBody {
        dataset: &a.out,
        samples: manifest.samples.len(),
    };
    write_json(&a.out.join("synth_run.json"), &Envelope::new("synth", &cfg, body))?;
    emit(&format!("wrote {} samples to {}\n", manifest.samples.len(), a.out.display()));
    Ok(())
}

// ----- train ----------------------------------------------------------------

#[derive(Serialize)]
struct TrainBody<'a> {
    summary: &'a ewasr::train::FitSummary,
    train_pixel_accuracy: f64,
    val_pixel_accuracy: Option<f64>,
    best_checkpoint: PathBuf,
    last_checkpoint: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if let Some(b) = a.backbone {
        cfg.model.backbone = b.into();
    }
    if let Some(n) = a.epochs {
        cfg.train.max_epochs = n;
        if a.patience.is_none() && cfg.train.patience > n {
            log::info!("patience capped at --epochs {n}");
            cfg.train.patience = n;
        }
    }
    if let Some(n) = a.patience {
        cfg.train.patience = n;
    }
    if let Some(n) = a.batch_size {
        cfg.train.batch_size = n;
    }
    if let Some(v) = a.lr_backbone {
        cfg.train.lr_backbone = v;
    }
    if let Some(v) = a.lr_decoder {
        cfg.train.lr_decoder = v;
    }
    let mut cfg = cfg.resolve(a.common.seed)?;
    if cfg.model.variant == Variant::WasrRef {
        return Err(CliError::Usage("wasr_ref is a cost-analysis graph and cannot be trained".into()));
    }
    let train_set = load_samples(&a.data)?;
    let val_set = match &a.val {
        Some(v) => load_samples(v)?,
        None => Vec::new(),
    };
    let (h, w) = resolution(&train_set)?;
    if !val_set.is_empty() && resolution(&val_set)? != (h, w) {
        return Err(CliError::Usage("validation images differ in size from training images".into()));
    }

    let (mut model, mut trainer) = match &a.resume {
        Some(path) => {
            existing_file(path, "checkpoint")?;
            let ckpt = Checkpoint::load(path)?;
            let mut model = model_from_checkpoint(&ckpt)?;
            let trainer = Trainer::resume(&mut model, &ckpt, cfg.train.clone(), cfg.loss.clone())?;
            cfg.model = model.config().clone();
            (model, trainer)
        }
        None => {
            cfg.model.input_height = h;
            cfg.model.input_width = w;
            let mut model = Model::build(&cfg.model)?;
            if let Some(p) = &a.backbone_weights {
                existing_file(p, "backbone weights")?;
                let n = model.load_backbone_weights(p)?;
                log::info!("loaded {n} backbone tensors from {}", p.display());
            }
            let trainer = Trainer::new(&model, cfg.train.clone(), cfg.loss.clone())?;
            (model, trainer)
        }
    };
    if (model.config().input_height, model.config().input_width) != (h, w) {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}x{} images, dataset has {h}x{w}",
            model.config().input_height,
            model.config().input_width
        )));
    }

    let header = serde_json::to_value(Envelope::new("train", &cfg, serde_json::json!({"kind": "header"})))
        .map_err(ewasr::Error::from)?;
    let summary = fit_to_dir(&mut trainer, &mut model, &train_set, &val_set, &a.out, &header)?;
    let train_acc = pixel_accuracy(&model, &train_set, cfg.loss.ignore_label, cfg.inference_batch)?;
    let val_acc = if val_set.is_empty() {
        None
    } else {
        Some(pixel_accuracy(&model, &val_set, cfg.loss.ignore_label, cfg.inference_batch)?)
    };
    let files = RunFiles::in_dir(&a.out);
    let body = TrainBody {
        summary: &summary,
        train_pixel_accuracy: train_acc,
        val_pixel_accuracy: val_acc,
        best_checkpoint: files.best,
        last_checkpoint: files.last,
    };
    write_json(&a.out.join("train_summary.json"), &Envelope::new("train", &cfg, body))?;
    emit(&format!(
        "epochs {}..{} best epoch {} loss {:.5}{} train pixel accuracy {:.4}\n",
        summary.last_epoch - summary.epochs_run + 1,
        summary.last_epoch,
        summary.best_epoch,
        summary.best_loss,
        if summary.early_stopped { " (early stop)" } else { "" },
        train_acc
    ));
    Ok(())
}

// ----- eval -----------------------------------------------------------------

#[derive(Serialize)]
struct EvalBody<'a> {
    source: String,
    report: &'a MetricsReport,
}

fn metrics_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", MetricsReport::summary_header());
    let _ = writeln!(s, "{}", r.summary_row());
    let _ = writeln!(s);
    let _ = writeln!(s, "id,tp,fp,fn,danger_tp,danger_fp,danger_fn,we_rmse");
    for f in &r.per_frame {
        let (o, d) = (&f.counts.overall, &f.counts.danger);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.4}",
            f.id, o.tp, o.fp, o.fn_, d.tp, d.fp, d.fn_, f.water_edge_rmse
        );
    }
    s
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(t) = a.coverage_threshold {
        cfg.eval.coverage_threshold = t;
    }
    if let Some(m) = a.min_blob_area {
        cfg.eval.min_blob_area = m;
    }
    let mut cfg = cfg.resolve(a.common.seed)?;
    cfg.eval.validate()?;
    let samples = load_samples(&a.data)?;
    let (preds, source) = match (&a.predictions, &a.checkpoint) {
        (Some(dir), _) => {
            existing_dir(dir, "predictions")?;
            let mut preds = Vec::with_capacity(samples.len());
            for s in &samples {
                let p = dir.join(format!("{}.png", s.id));
                if !p.is_file() {
                    return Err(CliError::Runtime(ewasr::Error::Dataset {
                        root: dir.clone(),
                        problems: vec![format!("{}: missing prediction {}", s.id, p.display())],
                    }));
                }
                let (h, w, labels) = read_mask(&p)?;
                if (h, w) != (s.height, s.width) {
                    return Err(CliError::Usage(format!(
                        "prediction {} is {h}x{w}, expected {}x{}",
                        p.display(),
                        s.height,
                        s.width
                    )));
                }
                preds.push(labels);
            }
            (preds, format!("predictions:{}", dir.display()))
        }
        (None, Some(ckpt)) => {
            existing_file(ckpt, "checkpoint")?;
            let model = ewasr::train::load_model(ckpt)?;
            cfg.model = model.config().clone();
            let preds = predict_labels(&model, &samples, cfg.inference_batch)?;
            if a.save_predictions {
                let dir = a.out.join("predictions");
                std::fs::create_dir_all(&dir)?;
                for (s, p) in samples.iter().zip(&preds) {
                    write_mask(&dir.join(format!("{}.png", s.id)), s.height, s.width, p)?;
                }
            }
            (preds, format!("checkpoint:{}", ckpt.display()))
        }
        (None, None) => return Err(CliError::Usage("one of --predictions or --checkpoint is required".into())),
    };
    let mut frames = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let ann = s
            .annotation
            .as_ref()
            .ok_or_else(|| CliError::Runtime(ewasr::Error::Validation(format!("sample {} has no annotation", s.id))))?;
        frames.push((s.id.as_str(), p.as_slice(), ann));
    }
    let report = evaluate(&frames, &cfg.eval)?;
    let body = EvalBody { source, report: &report };
    write_json(&a.out.join("metrics.json"), &Envelope::new("eval", &cfg, body))?;
    write_text(&a.out.join("metrics.csv"), &format!("{}{}", text_header("eval", &cfg), metrics_text(&report)))?;
    emit(&format!("{}\n{}\n", MetricsReport::summary_header(), report.summary_row()));
    Ok(())
}

// ----- profile --------------------------------------------------------------

#[derive(Serialize)]
struct ProfileBody<'a> {
    report: &'a CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    replacement_sweep: Option<&'a ReplacementSweep>,
}

fn sweep_table(s: &ReplacementSweep) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "1x1 replacement sweep (base {:.3}M params, {:.3}G MACs)", s.base_params as f64 / 1e6, s.base_macs as f64 / 1e9);
    let _ = writeln!(out, "{:<10} {:>12} {:>12} {:>14} {:>14}", "block", "params_M", "macs_G", "d_params_M", "d_macs_G");
    for v in &s.variants {
        let _ = writeln!(
            out,
            "{:<10} {:>12.3} {:>12.3} {:>14.3} {:>14.3}",
            v.block,
            v.params as f64 / 1e6,
            v.macs as f64 / 1e9,
            v.delta_params as f64 / 1e6,
            v.delta_macs as f64 / 1e9
        );
    }
    out
}

pub fn profile(a: ProfileArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
        if a.backbone.is_none() {
            cfg.model.backbone = match cfg.model.variant {
                Variant::WasrRef => BackbonePreset::Resnet101Dilated,
                _ => BackbonePreset::Resnet18,
            };
        }
    }
    if let Some(b) = a.backbone {
        cfg.model.backbone = b.into();
    }
    if let Some(h) = a.height {
        cfg.model.input_height = h;
    }
    if let Some(w) = a.width {
        cfg.model.input_width = w;
    }
    for b in &a.replace {
        cfg.model.block_replacements.insert(b.clone(), Replacement::Conv1x1);
    }
    if a.no_long_skip {
        cfg.model.long_skip_srm = false;
    }
    if a.channel_reduction {
        cfg.model.channel_reduction = true;
    }
    if let Some(r) = a.repeats {
        cfg.timing.repeats = r;
    }
    if let Some(w) = a.warmup {
        cfg.timing.warmup = w;
    }
    let cfg = cfg.resolve(a.common.seed)?;
    let mut report = count_config(&cfg.model)?;
    if a.time {
        let model = Model::build(&cfg.model)?;
        time_blocks(&model, &mut report, &cfg.timing)?;
    }
    let sweep = if cfg.model.variant.is_wasr() && cfg.model.block_replacements.is_empty() {
        Some(replacement_sweep(&cfg.model)?)
    } else {
        None
    };
    let body = ProfileBody {
        report: &report,
        replacement_sweep: sweep.as_ref(),
    };
    write_json(&a.out.join("cost_report.json"), &Envelope::new("profile", &cfg, body))?;
    let mut text = text_header("profile", &cfg);
    text.push_str(&report.table());
    text.push('\n');
    if let Some(s) = &sweep {
        text.push('\n');
        text.push_str(&sweep_table(s));
    }
    write_text(&a.out.join("cost_report.txt"), &text)?;
    emit(&format!("{}\n", report.table()));
    Ok(())
}

// ----- analyze --------------------------------------------------------------

#[derive(Serialize)]
struct DiversityBody<'a> {
    images: usize,
    gates: &'a [ewasr::profiling::GateDiversity],
}

#[derive(Serialize)]
struct RankingBody<'a> {
    ranking: &'a [ewasr::profiling::RankedSample],
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common)?;
    if let Some(b) = a.bins {
        cfg.histogram_bins = b;
    }
    let mut cfg = cfg.resolve(a.common.seed)?;
    existing_file(&a.checkpoint, "checkpoint")?;
    let model = ewasr::train::load_model(&a.checkpoint)?;
    cfg.model = model.config().clone();
    let samples = load_samples(&a.data)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(ewasr::Error::EmptyDataset("analysis set".into())));
    }

    let div = channel_weight_diversity(&model, &samples, cfg.histogram_bins, cfg.inference_batch)?;
    let body = DiversityBody {
        images: samples.len(),
        gates: &div,
    };
    write_json(&a.out.join("gate_diversity.json"), &Envelope::new("analyze", &cfg, body))?;

    let mut text = text_header("analyze", &cfg);
    let _ = writeln!(text, "{:<24} {:>8} {:>10} {:>10}", "gate", "channels", "mean_std", "max_std");
    for d in &div {
        let mean = d.stds.iter().sum::<f64>() / d.stds.len().max(1) as f64;
        let max = d.stds.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(text, "{:<24} {:>8} {:>10.4} {:>10.4}", d.gate, d.channels, mean, max);
    }

    // Only the WaSR decoders feed the IMU mask into a channel gate.
    if cfg.model.variant.is_wasr() {
        let ranking = rank_by_imu_weight(&model, &samples, cfg.inference_batch)?;
        write_json(&a.out.join("imu_ranking.json"), &Envelope::new("analyze", &cfg, RankingBody { ranking: &ranking }))?;
        let k = a.top.min(ranking.len());
        let _ = writeln!(text, "\nhighest IMU weight");
        for r in &ranking[..k] {
            let _ = writeln!(text, "  {} {:.4}", r.id, r.weight);
        }
        let _ = writeln!(text, "lowest IMU weight");
        for r in ranking[ranking.len() - k..].iter().rev() {
            let _ = writeln!(text, "  {} {:.4}", r.id, r.weight);
        }
    } else {
        let _ = writeln!(text, "\nmodel has no IMU-consuming channel gate; ranking skipped");
    }
    write_text(&a.out.join("analysis.txt"), &text)?;
    emit(&text);
    Ok(())
}
