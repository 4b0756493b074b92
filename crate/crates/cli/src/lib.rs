//! `steerlab` command-line runner.
//!
//! Every subcommand reads a JSON experiment config, writes CSV and JSON
//! artifacts into an output directory and exits with 0 (success),
//! 1 (a verification failed) or 2 (bad configuration or I/O).

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod output;
pub mod suite;

pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "steerlab",
    version,
    about = "Prompt-shift laboratory experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Closed-form vs. brute-force concentration check.
    VerifyTheorem,
    /// Prompt/context split of a single attention head over a temperature grid.
    Decompose,
    /// Soft prompt steering the head output to a target vector.
    ConstructPrompt,
    /// Roll a shift plan and sample responses from every round.
    Simulate,
    /// Group inner-product sums of prompt-induced shifts.
    Analyze,
    /// Three-component PCA of prompt-induced shifts.
    Pca,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VerifyTheorem => "verify-theorem",
            Command::Decompose => "decompose",
            Command::ConstructPrompt => "construct-prompt",
            Command::Simulate => "simulate",
            Command::Analyze => "analyze",
            Command::Pca => "pca",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] steerlab_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Core(steerlab_core::Error::Unvalidated { .. }) => 1,
            CliError::Config(_) | CliError::Core(_) | CliError::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let mut loaded = config::LoadedConfig::load(path)?;
    if let Some(seed) = cli.seed {
        loaded.config.seed = seed;
    }
    if let Some(out) = &cli.out {
        loaded.out_dir = out.clone();
    }
    commands::dispatch(cli.command, &loaded)
}
