//! Command-line grammar.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "advreg", about = "Adversarially regularized classifiers on changing-priors data", disable_version_flag = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (train/val/test JSON lines plus spec.json).
    Generate(GenerateArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Train a grid of regularization settings.
    Sweep(SweepArgs),
    /// Compare finished runs per question type.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["spec", "version"])))]
pub struct GenerateArgs {
    /// Dataset spec JSON.
    pub spec: Option<PathBuf>,
    /// Built-in spec: 1 (strong priors) or 2 (milder priors).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub version: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's generation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's model/training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub overwrite: bool,
    /// Validate the config and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridKind {
    Standard,
    Accelerated,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// Comma-separated lambda_adv values; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    pub lambda_adv: Vec<f64>,
    /// Comma-separated final reversal coefficients; static unless a
    /// schedule grid is given.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grl: Vec<f64>,
    /// Delay/warmup grid, rescaled to the config's iteration budget.
    #[arg(long, value_enum)]
    pub schedule_grid: Option<GridKind>,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Baseline run directory followed by one or more regularized runs.
    #[arg(num_args = 2.., required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Print per-question-type deltas against the first run.
    #[arg(long)]
    pub delta: bool,
    /// Rows in each half of the delta table.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Also write report.csv (and delta.csv) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}
