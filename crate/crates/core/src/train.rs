//! Optimisation loop: RMSProp with momentum over two parameter groups,
//! validation-loss early stopping, NDJSON logging and resumable checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch, SegSample};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mode};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::models::{argmax_labels, Model, ModelConfig};
use crate::params::{under, ParamId, ParamStore};

/// Parameters under this prefix use `lr_backbone`; all others `lr_decoder`.
pub const BACKBONE_GROUP: &str = "backbone";

const OPTIM_SQ: &str = "optim.square_avg.";
const OPTIM_BUF: &str = "optim.momentum.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    pub momentum: f64,
    /// Smoothing constant of the squared-gradient average.
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-6,
            lr_decoder: 1e-5,
            momentum: 0.9,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lr_backbone) || !nonneg(self.lr_decoder) {
            return Err(config_err!("learning rates must be finite and >= 0"));
        }
        if !(self.rms_eps.is_finite() && self.rms_eps > 0.0) {
            return Err(config_err!("rms_eps must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.rms_alpha) {
            return Err(config_err!("momentum and rms_alpha must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(config_err!("batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(config_err!(
                "patience {} exceeds max_epochs {}",
                self.patience,
                self.max_epochs
            ));
        }
        Ok(())
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        if under(name, BACKBONE_GROUP) {
            self.lr_backbone
        } else {
            self.lr_decoder
        }
    }
}

/// RMSProp with heavy-ball momentum:
///
/// ```text
/// v ← α v + (1 − α) g²
/// b ← μ b + g / (√v + ε)
/// θ ← θ − lr · b
/// ```
#[derive(Clone, Debug, Default)]
pub struct RmsProp {
    square_avg: Vec<Option<Vec<f64>>>,
    momentum: Vec<Option<Vec<f64>>>,
}

impl RmsProp {
    pub fn new(ps: &ParamStore) -> Self {
        Self {
            square_avg: vec![None; ps.len()],
            momentum: vec![None; ps.len()],
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, id: ParamId, grad: &[f64], lr: f64, cfg: &TrainConfig) {
        let i = id.index();
        let sq = self.square_avg[i].get_or_insert_with(|| vec![0.0; grad.len()]);
        let buf = self.momentum[i].get_or_insert_with(|| vec![0.0; grad.len()]);
        for ((v, b), &g) in sq.iter_mut().zip(buf.iter_mut()).zip(grad) {
            *v = cfg.rms_alpha * *v + (1.0 - cfg.rms_alpha) * g * g;
            *b = cfg.momentum * *b + g / (v.sqrt() + cfg.rms_eps);
        }
        let buf = &*buf;
        ps.update(id, |theta| {
            for (t, b) in theta.iter_mut().zip(buf) {
                *t -= lr * b;
            }
        });
    }

    fn save(&self, ps: &ParamStore, ckpt: &mut Checkpoint) {
        for (id, e) in ps.entries() {
            let i = id.index();
            for (prefix, state) in [(OPTIM_SQ, &self.square_avg[i]), (OPTIM_BUF, &self.momentum[i])] {
                if let Some(v) = state {
                    ckpt.entries.push(crate::checkpoint::Entry {
                        name: format!("{prefix}{}", e.name),
                        dims: e.shape.dims().to_vec(),
                        values: v.iter().map(|&x| x as f32).collect(),
                    });
                }
            }
        }
    }

    fn restore(ps: &ParamStore, ckpt: &Checkpoint) -> Self {
        let mut o = Self::new(ps);
        for (id, e) in ps.entries() {
            let fetch = |prefix: &str| {
                ckpt.get(&format!("{prefix}{}", e.name))
                    .filter(|en| en.values.len() == e.numel())
                    .map(|en| en.values.iter().map(|&x| x as f64).collect())
            };
            o.square_avg[id.index()] = fetch(OPTIM_SQ);
            o.momentum[id.index()] = fetch(OPTIM_BUF);
        }
        o
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_loss: Option<f64>,
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    pub improved: bool,
}

/// Counters persisted with each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_loss: Option<f64>,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub last_epoch: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub early_stopped: bool,
}

/// Stateful trainer; owns optimiser state and early-stopping counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub state: TrainState,
    optim: RmsProp,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        Ok(Self {
            optim: RmsProp::new(model.params()),
            config,
            loss,
            state: TrainState {
                epoch: 0,
                best_loss: None,
                best_epoch: 0,
                stale_epochs: 0,
            },
        })
    }

    /// Restores weights, optimiser state and counters from `ckpt`.
    pub fn resume(model: &mut Model, ckpt: &Checkpoint, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        let mut t = Self::new(model, config, loss)?;
        ckpt.load_into(model.params_mut())?;
        t.state = serde_json::from_value(ckpt.metadata["train_state"].clone())
            .map_err(|e| Error::Checkpoint(format!("missing or malformed train_state: {e}")))?;
        t.optim = RmsProp::restore(model.params(), ckpt);
        Ok(t)
    }

    /// Weights, optimiser state and counters.
    pub fn checkpoint(&self, model: &Model) -> Checkpoint {
        let mut c = model_checkpoint(model, serde_json::json!({
            "train": self.config,
            "loss": self.loss,
            "train_state": self.state,
        }));
        self.optim.save(model.params(), &mut c);
        c
    }

    /// One optimisation step on a batch; returns its loss breakdown.
    pub fn step(&mut self, model: &mut Model, samples: &[&SegSample]) -> Result<LossBreakdown> {
        let (images, imus, labels) = batch(samples)?;
        let mut g = Graph::new(Mode::Train);
        let x = g.input(images);
        let out = model.forward_graph(&mut g, x, &imus)?;
        let l = total_loss(g.value(out.probs), g.value(out.features), &labels, model.params(), &self.loss)?;
        let grads = g.backward(&[(out.probs, l.dprobs), (out.features, l.dfeatures)])?;
        let ps = model.params_mut();
        for (id, values) in g.take_buffer_updates() {
            ps.set_values(id, &values)?;
        }
        let wd2 = 2.0 * self.loss.weight_decay;
        for (id, grad) in grads.params() {
            let e = ps.entry(id);
            if !e.kind.trainable() {
                continue;
            }
            let lr = self.config.lr_for(&e.name);
            let grad: Vec<f64> = {
                let theta = ps.value(id);
                grad.data().iter().zip(theta.data()).map(|(g, t)| g + wd2 * t).collect()
            };
            self.optim.step(ps, id, &grad, lr, &self.config);
        }
        Ok(l.parts)
    }

    /// Shuffles with a stream derived from the seed and the epoch number,
    /// so a resumed run replays the same order.
    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch and updates the early-stopping counters. Without a
    /// validation set the training loss drives early stopping.
    pub fn run_epoch(&mut self, model: &mut Model, train: &[SegSample], val: &[SegSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training set".into()));
        }
        let epoch = self.state.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let mut sum = LossBreakdown::default();
        let mut weight = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            let parts = self.step(model, &samples)?;
            let k = samples.len() as f64;
            sum.focal += parts.focal * k;
            sum.separation += parts.separation * k;
            sum.decay += parts.decay * k;
            sum.total += parts.total * k;
            weight += samples.len();
        }
        let inv = 1.0 / weight as f64;
        let train_loss = LossBreakdown {
            focal: sum.focal * inv,
            separation: sum.separation * inv,
            decay: sum.decay * inv,
            total: sum.total * inv,
        };
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val, &self.loss, self.config.batch_size)?.total)
        };
        let monitored = val_loss.unwrap_or(train_loss.total);
        let improved = self.state.best_loss.is_none_or(|b| monitored < b);
        self.state.epoch = epoch;
        if improved {
            self.state.best_loss = Some(monitored);
            self.state.best_epoch = epoch;
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
        }
        Ok(EpochRecord {
            epoch,
            train: train_loss,
            val_loss,
            lr_backbone: self.config.lr_backbone,
            lr_decoder: self.config.lr_decoder,
            improved,
        })
    }

    pub fn should_stop(&self) -> bool {
        self.state.stale_epochs >= self.config.patience || self.state.epoch >= self.config.max_epochs
    }

    /// Trains until early stopping or `max_epochs`. `on_epoch` sees every
    /// record together with the model after that epoch.
    pub fn fit(
        &mut self,
        model: &mut Model,
        train: &[SegSample],
        val: &[SegSample],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer, &Model) -> Result<()>,
    ) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training set".into()));
        }
        let start = self.state.epoch;
        while !self.should_stop() {
            let rec = self.run_epoch(model, train, val)?;
            log::info!(
                "epoch {} loss {:.5} val {:?}{}",
                rec.epoch,
                rec.train.total,
                rec.val_loss,
                if rec.improved { " *" } else { "" }
            );
            on_epoch(&rec, self, model)?;
        }
        Ok(FitSummary {
            epochs_run: self.state.epoch - start,
            last_epoch: self.state.epoch,
            best_epoch: self.state.best_epoch,
            best_loss: self.state.best_loss.unwrap_or(f64::NAN),
            early_stopped: self.state.stale_epochs >= self.config.patience,
        })
    }
}

/// Output files written by [`fit_to_dir`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub log: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            log: dir.join("train_log.ndjson"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

/// [`Trainer::fit`] writing an NDJSON log (appended on resume), the best
/// checkpoint and the latest checkpoint into `dir`.
pub fn fit_to_dir(
    trainer: &mut Trainer,
    model: &mut Model,
    train: &[SegSample],
    val: &[SegSample],
    dir: &Path,
    header: &serde_json::Value,
) -> Result<FitSummary> {
    fs::create_dir_all(dir)?;
    let files = RunFiles::in_dir(dir);
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&files.log)?,
    );
    if trainer.state.epoch == 0 {
        writeln!(log, "{}", serde_json::to_string(header)?)?;
    }
    let summary = trainer.fit(model, train, val, |rec, t, m| {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        log.flush()?;
        let ckpt = t.checkpoint(m);
        if rec.improved {
            ckpt.save(&files.best)?;
        }
        ckpt.save(&files.last)
    })?;
    Ok(summary)
}

/// A checkpoint holding the model weights and its configuration; `extra`
/// fields are merged into the metadata.
pub fn model_checkpoint(model: &Model, extra: serde_json::Value) -> Checkpoint {
    let mut meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "model": model.config(),
    });
    if let (Some(m), serde_json::Value::Object(x)) = (meta.as_object_mut(), extra) {
        m.extend(x);
    }
    let mut c = Checkpoint::new(meta);
    c.push_params(model.params());
    c
}

/// Rebuilds the model described by a checkpoint's metadata and loads its
/// weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let cfg: ModelConfig = serde_json::from_value(ckpt.metadata["model"].clone())
        .map_err(|e| Error::Checkpoint(format!("missing or malformed model config: {e}")))?;
    let mut m = Model::build(&cfg)?;
    ckpt.load_into(m.params_mut())?;
    Ok(m)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

/// Mean evaluation-mode loss over `samples`.
pub fn evaluate_loss(model: &Model, samples: &[SegSample], cfg: &LossConfig, batch_size: usize) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("loss evaluation set".into()));
    }
    let mut sum = LossBreakdown::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, imus, labels) = batch(&refs)?;
        let p = model.forward(&images, &imus)?;
        let l = total_loss(&p.probs, &p.features, &labels, model.params(), cfg)?;
        let k = chunk.len() as f64;
        sum.focal += l.parts.focal * k;
        sum.separation += l.parts.separation * k;
        sum.decay += l.parts.decay * k;
        sum.total += l.parts.total * k;
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(LossBreakdown {
        focal: sum.focal * inv,
        separation: sum.separation * inv,
        decay: sum.decay * inv,
        total: sum.total * inv,
    })
}

/// Evaluation-mode arg-max label masks, one per sample.
pub fn predict_labels(model: &Model, samples: &[SegSample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, imus, _) = batch(&refs)?;
        let p = model.forward(&images, &imus)?;
        out.extend((0..chunk.len()).map(|n| argmax_labels(&p.probs, n)));
    }
    Ok(out)
}

/// Fraction of non-ignored pixels whose arg-max class equals the label.
pub fn pixel_accuracy(model: &Model, samples: &[SegSample], ignore: u8, batch_size: usize) -> Result<f64> {
    let preds = predict_labels(model, samples, batch_size)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        for (&a, &b) in p.iter().zip(&s.labels) {
            if b != ignore {
                total += 1;
                hit += usize::from(a == b);
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Opens a file for writing, creating parent directories.
pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}
