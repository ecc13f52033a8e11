//! `unidetect`: batch pipeline for training, attacking, fitting detectors,
//! scoring and evaluating. See the README for the config format.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unidetect_core::detect::DetectorId;
use unidetect_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset file missing: {0}")]
    MissingData(PathBuf),
    #[error("{0}")]
    EmptyYield(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::MissingData(_) | CliError::Core(Error::Input(_) | Error::Format(_) | Error::Io(_)) => 3,
            CliError::EmptyYield(_) | CliError::Core(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "unidetect", version, about = "Adversarial and backdoor example detection pipeline")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed` of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `out_dir` of the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AttackArg {
    Fgsm,
    Backdoor,
    /// Clean test samples (the benign population).
    Clean,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model (backdoored when the config has a [poison] block).
    Train,
    /// Build an attack or clean sample archive from the test split.
    Attack {
        kind: AttackArg,
        #[arg(long)]
        model: PathBuf,
    },
    /// Fit detectors on the clean training split.
    Fit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "detector", required = true, value_parser = parse_detector)]
        detectors: Vec<DetectorId>,
    },
    /// Score a sample archive with fitted detector states.
    Detect {
        #[arg(long = "state", required = true)]
        states: Vec<PathBuf>,
        #[arg(long)]
        samples: PathBuf,
        /// Population name for the sample ids; defaults to the archive kind.
        #[arg(long)]
        population: Option<String>,
    },
    /// AUC matrix from score CSVs.
    Evaluate {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Detectors that must be present; defaults to all found.
        #[arg(long = "detector", value_parser = parse_detector)]
        detectors: Vec<DetectorId>,
    },
    /// Per-sample timing of detectors and plain inference.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "detector", required = true, value_parser = parse_detector)]
        detectors: Vec<DetectorId>,
    },
}

fn parse_detector(s: &str) -> Result<DetectorId, String> {
    DetectorId::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = DetectorId::ALL.iter().map(|d| d.name()).collect();
        format!("unknown detector '{s}', expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
