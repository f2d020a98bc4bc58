//! The `kdseg` command line.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{resolve_config, ResolvedConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] kdseg::Error),
}

impl CliError {
    /// 2 for usage, 3 for invalid configuration or inputs, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &kdseg::Error) -> i32 {
    use kdseg::Error::*;
    match e {
        Parameter { .. } | Config(_) | Compatibility(_) | Contract(_) => 3,
        Fold { source, .. } => core_exit_code(source),
        Numeric(_) | Ingestion { .. } | DegenerateInput(_) | Diverged { .. } | Io(_) => 1,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "kdseg",
    version,
    about = "Multi-modal to mono-modal distillation for 3D tumor segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with [network], [training], [loss] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda=0.5` or `--set training.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-modality dataset in the per-subject NIfTI layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        subjects: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write uncompressed `.nii` files.
        #[arg(long)]
        no_compress: bool,
    },
    /// Train the multi-modal teacher on one fold's training split.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Train the mono-modal student against a frozen teacher checkpoint.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        teacher: Option<PathBuf>,
        /// Train the mono-modal network on ground truth only, without a teacher.
        #[arg(long, conflicts_with = "teacher")]
        baseline: bool,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Score a checkpoint on a dataset with per-region hard Dice.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score only this fold's validation split instead of every subject.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Clip predictions to ET ⊆ TC ⊆ WT before scoring.
        #[arg(long)]
        nesting: bool,
        /// Write per-subject and mean scores as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated loss-term ablation with and without skip connections.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
