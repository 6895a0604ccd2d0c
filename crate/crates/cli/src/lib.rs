//! The `smp` command line: configuration, dispatch and artifact wiring.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{resolve, Overrides, Precision, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] smp_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "smp", version, about = "Single-shot meta-pruning of attention heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Share of heads pruned per layer.
    #[arg(long, global = true, value_name = "F")]
    pub ratio: Option<f64>,
    /// Output directory of this command.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and task datasets.
    GenData,
    /// Masked-language-model pre-training of the encoder.
    Pretrain,
    /// Meta-train the head scorer.
    TrainSmp,
    /// Choose heads to keep and write a gate file.
    Prune,
    /// Fine-tune the pruned encoder on classification tasks.
    Finetune,
    /// Similarity evaluation without fine-tuning.
    EvalSim,
    /// Throughput and memory of the pruned versus the full encoder.
    Bench,
    /// Prune and fine-tune across ratios and seeds.
    SweepRatio,
    /// Attention heatmaps with per-head scores.
    Viz,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainSmp => "train-smp",
            Command::Prune => "prune",
            Command::Finetune => "finetune",
            Command::EvalSim => "eval-sim",
            Command::Bench => "bench",
            Command::SweepRatio => "sweep-ratio",
            Command::Viz => "viz",
        }
    }
}

/// Resolves the configuration and runs one command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides =
        Overrides { seed: cli.common.seed, ratio: cli.common.ratio, precision: cli.common.precision };
    let mut cfg = resolve(cli.common.config.as_deref(), &overrides, cli.command.name())?;
    if let Some(out) = &cli.common.out {
        *commands::output_dir(&mut cfg, cli.command) = out.clone();
    }
    log::info!("resolved configuration:\n{}", cfg.to_json().trim_end());
    commands::dispatch(cli.command, &cfg, cli.common.force)
}
