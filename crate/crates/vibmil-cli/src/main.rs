//! `vibmil` — weakly supervised bag-distillation experiments.
//!
//! Five operations: `generate` a synthetic dataset, `corrupt` it, `train`
//! the pipeline (whole, per stage, or as an ablation sweep), `eval` a
//! checkpoint, and `report` to merge result tables. Set `RUST_LOG=info`
//! (or `debug`) for progress logging.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 missing or
//! unreadable files, 4 training divergence (the partial report is still
//! written).

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vibmil::pipeline::PipelineError;
use vibmil::synthgen::{CorruptionKind, SynthError};

use commands::EvalHead;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The request itself is wrong: bad config key, bad flag value.
    #[error("{0}")]
    Config(String),
    /// A file is missing, unreadable, or malformed.
    #[error("{0}")]
    Io(String),
    /// Training produced a non-finite loss.
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> CliError {
        match e {
            SynthError::InvalidConfig(_)
            | SynthError::BadSplitFractions(_)
            | SynthError::EmptySplit { .. } => CliError::Config(e.to_string()),
            SynthError::Format(_) | SynthError::ChecksumMismatch | SynthError::Io(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        match e {
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            PipelineError::Diverged { .. } => CliError::Diverged(e.to_string()),
            PipelineError::Checkpoint(_) => CliError::Io(e.to_string()),
        }
    }
}

/// Corruption kinds as spelled on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorruptKindArg {
    Shift,
    Noise,
    Scale,
    ChannelMix,
}

impl From<CorruptKindArg> for CorruptionKind {
    fn from(k: CorruptKindArg) -> CorruptionKind {
        match k {
            CorruptKindArg::Shift => CorruptionKind::Shift,
            CorruptKindArg::Noise => CorruptionKind::Noise,
            CorruptKindArg::Scale => CorruptionKind::Scale,
            CorruptKindArg::ChannelMix => CorruptionKind::ChannelMix,
        }
    }
}

#[derive(Parser)]
#[command(name = "vibmil", version, about = "Weakly supervised bag-distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Where to write the dataset.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply a seeded feature corruption to a dataset file.
    Corrupt {
        /// Dataset to corrupt.
        #[arg(long)]
        data: PathBuf,
        /// Corruption kind.
        #[arg(long, value_enum)]
        kind: CorruptKindArg,
        /// Severity level, 1..=5.
        #[arg(long, default_value_t = 2)]
        severity: u8,
        /// Corruption seed.
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Where to write the corrupted dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pipeline or run an ablation sweep.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset to split and train on.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// 1, 2, 3, all, or ablation:{beta,topk,lr,randomk}.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        /// Experiment config the checkpoint was trained under.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file (e.g. stage3.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to evaluate on (may be corrupted).
        #[arg(long)]
        data: PathBuf,
        /// The dataset the checkpoint was trained from.
        #[arg(long)]
        train_data: PathBuf,
        /// Aggregations to evaluate (repeatable or comma-separated).
        #[arg(long, value_enum, value_delimiter = ',')]
        head: Vec<EvalHead>,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge every report under a directory and summarize.
    Report {
        /// Directory to scan recursively.
        #[arg(long)]
        dir: PathBuf,
        /// Where to write combined.csv and summary.txt (defaults to --dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { config, out, seed } => commands::generate(&config, seed, &out),
        Command::Corrupt { data, kind, severity, seed, out } => {
            commands::corrupt(&data, kind.into(), severity, seed, &out)
        }
        Command::Train { config, data, out, seed, stage } => {
            commands::train(&config, &data, out.as_deref(), seed, &stage)
        }
        Command::Eval { config, checkpoint, data, train_data, head, out, seed } => {
            commands::eval(&config, &checkpoint, &data, &train_data, &head, out.as_deref(), seed)
        }
        Command::Report { dir, out } => commands::report(&dir, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
