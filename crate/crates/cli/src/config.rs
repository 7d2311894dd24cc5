//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::Path;

use ewasr::data::SynthConfig;
use ewasr::eval::EvalConfig;
use ewasr::losses::LossConfig;
use ewasr::models::ModelConfig;
use ewasr::profiling::TimingConfig;
use ewasr::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable of every command. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section's own seed when resolved.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub timing: TimingConfig,
    /// Batch size for inference passes (eval, analyze).
    pub inference_batch: usize,
    pub histogram_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            timing: TimingConfig::default(),
            inference_batch: 8,
            histogram_bins: 25,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(p) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))
    }

    /// Applies the seed override and propagates the run seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.timing.seed = self.seed;
        if self.inference_batch == 0 || self.histogram_bins == 0 {
            return Err(CliError::Usage("inference_batch and histogram_bins must be positive".into()));
        }
        Ok(self)
    }
}
