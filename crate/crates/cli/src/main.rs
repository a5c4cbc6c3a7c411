//! Command-line driver: config loading, seed and thread control, and
//! deterministic CSV/JSON artifact emission for the experiment commands.

mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

use config::{load_config, Config};

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or unwritable output — exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// A required input artifact is absent — exit code 3.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    /// A validation check failed — exit code 1.
    #[error("checks failed: {0}")]
    CheckFailure(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailure(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "ictxot", about = "In-context Gaussian optimal-transport experiments")]
struct Cli {
    /// JSON config with sections {task_family, model, train, eval}.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for the evaluation sweeps (fallback: ICTXOT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the linear-attention model; writes checkpoint + history CSV.
    TrainParametric,
    /// Evaluate error vs test prompt length and fit the decay law.
    ScalingLaw,
    /// Train the cross-attention model; writes checkpoint + prediction CSV.
    TrainNonparametric,
    /// Run the closed-form oracle checks; nonzero exit on any failure.
    ValidateTheory,
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(t) = flag {
        return Ok(t.max(1));
    }
    match std::env::var("ICTXOT_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => s
            .parse::<usize>()
            .map(|t| t.max(1))
            .map_err(|_| CliError::Config(format!("ICTXOT_THREADS must be an integer, got {s:?}"))),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let default = match cli.command {
        Command::TrainNonparametric => Config::nonparametric_default(),
        _ => Config::default(),
    };
    let mut cfg = load_config(cli.config.as_deref(), default)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let seed = cfg.seed;
    let threads = resolve_threads(cli.threads)?;
    match cli.command {
        Command::TrainParametric => commands::cmd_train_parametric(&cfg, seed, &cli.out),
        Command::ScalingLaw => commands::cmd_scaling_law(&cfg, seed, &cli.out, threads),
        Command::TrainNonparametric => commands::cmd_train_nonparametric(&cfg, seed, &cli.out),
        Command::ValidateTheory => commands::cmd_validate_theory(&cfg, seed, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
