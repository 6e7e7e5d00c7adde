//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "topoguide", version, about = "Guided diffusion for minimum-compliance topology generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the main dataset plus the regressor and classifier sets.
    GenData(GenDataArgs),
    /// Train the denoiser or one of the guidance surrogates.
    Train(TrainArgs),
    /// Grid-search guidance scales and noise thresholds on a split.
    Tune(TuneArgs),
    /// Generate designs for every problem of a split.
    Sample(SampleArgs),
    /// Score a sampling run against the stored ground truth.
    Evaluate(EvaluateArgs),
    /// Audit a dataset directory offline.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub nx: usize,
    #[arg(long, default_value_t = 16)]
    pub ny: usize,
    /// `toy`, `full`, or `train,validation,level1,level2` counts.
    #[arg(long, default_value = "toy")]
    pub sizes: String,
    /// Comma-separated training scenario ids (default: the standard 42).
    #[arg(long)]
    pub train_bc: Option<String>,
    /// Comma-separated held-out scenario ids (default: the standard 5).
    #[arg(long)]
    pub test_bc: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub simp_max_iters: usize,
    /// Skip the fake-load designs of the regressor set.
    #[arg(long)]
    pub no_fake_load: bool,
    /// Sampling run (on the train split) whose designs join the regressor set.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Diffusion,
    Regressor,
    Classifier,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub model: Model,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Channel width of the first level (default 32 for the denoiser, 16
    /// for surrogates).
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub time_dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub timesteps: usize,
    #[arg(long, default_value = "linear")]
    pub schedule: String,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Share of surrogate problems held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Noisy copies per validation design and noise band.
    #[arg(long, default_value_t = 2)]
    pub val_draws: usize,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub diffusion: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Reverse steps after respacing the training schedule.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Use only the first N problems of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Designs denoised together in one batch.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub regressor: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long, default_value = "validation")]
    pub split: String,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Comma-separated grid values.
    #[arg(long, default_value = "0,1")]
    pub lambda_c: String,
    #[arg(long, default_value = "0,1")]
    pub lambda_fm: String,
    #[arg(long, default_value = "500")]
    pub mln_c: String,
    #[arg(long, default_value = "500")]
    pub mln_fm: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Guidance file written by `tune` (keys `guidance.*`).
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_fm: Option<f64>,
    #[arg(long)]
    pub mln_c: Option<usize>,
    #[arg(long)]
    pub mln_fm: Option<usize>,
    /// Evaluate the regressor before the classifier.
    #[arg(long)]
    pub regressor_first: bool,
    #[arg(long, default_value = "level1")]
    pub split: String,
    #[arg(long, default_value_t = 9)]
    pub reps: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip writing PGM renders.
    #[arg(long)]
    pub no_render: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Second run over the same problems and seeds for paired tests.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub data: PathBuf,
}
