//! `ewasr` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ewasr::backbone::BackbonePreset;
use ewasr::models::Variant;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(ewasr::Error),
}

impl From<ewasr::Error> for CliError {
    fn from(e: ewasr::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e)
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ewasr", version, about = "Maritime obstacle segmentation: data, training, evaluation and cost analysis")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random process of the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a model, or resume training from a checkpoint.
    Train(TrainArgs),
    /// Score predictions (mask files or a checkpoint) against annotations.
    Eval(EvalArgs),
    /// Count parameters and MACs per block, optionally timing them.
    Profile(ProfileArgs),
    /// Channel-gate diversity histograms and IMU-weight ranking.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    #[value(name = "ewasr")]
    Ewasr,
    #[value(name = "wasr_light")]
    WasrLight,
    #[value(name = "wasr_ref")]
    WasrRef,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Ewasr => Variant::Ewasr,
            VariantArg::WasrLight => Variant::WasrLight,
            VariantArg::WasrRef => Variant::WasrRef,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackboneArg {
    #[value(name = "tiny")]
    Tiny,
    #[value(name = "resnet18")]
    Resnet18,
    #[value(name = "resnet101_dilated")]
    Resnet101Dilated,
}

impl From<BackboneArg> for BackbonePreset {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Tiny => BackbonePreset::Tiny,
            BackboneArg::Resnet18 => BackbonePreset::Resnet18,
            BackboneArg::Resnet101Dilated => BackbonePreset::Resnet101Dilated,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory; without it the training loss drives
    /// early stopping.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (weights, optimiser state, counters).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<VariantArg>,
    #[arg(long)]
    backbone: Option<BackboneArg>,
    /// Checkpoint archive whose `backbone.*` entries initialise the encoder.
    #[arg(long)]
    backbone_weights: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_decoder: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Annotated dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Directory of predicted label masks named `<id>.png`.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Model checkpoint to run on the dataset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the checkpoint's predicted masks to `<out>/predictions`.
    #[arg(long, requires = "checkpoint")]
    save_predictions: bool,
    #[arg(long)]
    coverage_threshold: Option<f64>,
    #[arg(long)]
    min_blob_area: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    variant: Option<VariantArg>,
    /// Encoder preset; defaults to resnet18, or resnet101_dilated for wasr_ref.
    #[arg(long)]
    backbone: Option<BackboneArg>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Replace a WaSR decoder block by a 1x1 convolution (repeatable).
    #[arg(long = "replace", value_name = "BLOCK")]
    replace: Vec<String>,
    /// Disable the SRM blocks on the stride-8 skip path (eWaSR).
    #[arg(long)]
    no_long_skip: bool,
    /// Halve tap channels before fusion (eWaSR).
    #[arg(long)]
    channel_reduction: bool,
    /// Measure per-block wall time as well.
    #[arg(long)]
    time: bool,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    /// Samples listed at each end of the IMU-weight ranking in the text report.
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Profile(a) => commands::profile(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
