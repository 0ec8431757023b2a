use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coughpipe::models::{Architecture, Task};

#[derive(Debug, Parser)]
#[command(name = "coughpipe", version, about = "Cough classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and cache feature images for every event of a manifest.
    Extract(RunArgs),
    /// Train the sneeze/speech/noise network used for transfer learning.
    Pretrain(RunArgs),
    /// Nested cross-validation; writes report.json, roc.csv and fold checkpoints.
    Cv(RunArgs),
    /// Print a summary of a report.json.
    Report {
        report: PathBuf,
    },
    /// Write a synthetic corpus with a manifest.
    Synth(SynthArgs),
}

/// Flags shared by the pipeline commands. Anything left unset falls back to
/// the config file, then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Architecture>,
    /// Start every fold from a pre-trained network via a head swap.
    #[arg(long)]
    pub transfer: bool,
    /// Pre-trained checkpoint for transfer mode.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature cache directory (fallback: $COUGHPIPE_CACHE, then <out>/cache).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    /// Cough events of a classification task.
    Cough,
    /// Sneeze, speech and noise with sneezes in the minority.
    Pretrain,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "cough")]
    pub kind: CorpusKind,
    #[arg(long, value_parser = parse_task, default_value = "three_class")]
    pub task: Task,
    /// Patients per label (sneezes get half as many).
    #[arg(long, default_value_t = 30)]
    pub patients: usize,
    #[arg(long, default_value_t = 2)]
    pub events: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse()
}
