//! `cellshot` command-line interface.

mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] cellshot::error::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(cellshot::error::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cellshot", version, about = "Few-shot adaptation for cell instance segmentation")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed fields of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-image stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Write supervision targets of a dataset as MADC tensors.
    Targets {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model on a dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a pretrained model to a target dataset from K shots.
    Adapt(AdaptArgs),
    /// Predict masks and overlays for a directory of images.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Run the full baseline and ablation grid.
    Experiment,
    /// Summarize a results table and evaluate the trend checks.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Preset used when no --config is given: phase, fluor or worm.
    #[arg(long, default_value = "phase")]
    pub domain: String,
    /// Number of images for the preset.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// ADAPT, FT, NO_CB, NO_CD or NO_BOTH.
    #[arg(long, default_value = "ADAPT")]
    pub variant: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
