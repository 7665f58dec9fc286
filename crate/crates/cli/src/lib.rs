//! Command-line harness: configuration, experiment runners and result
//! files for the `cutmixsl` binary.

pub mod commands;
pub mod config;
pub mod output;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<cutmixsl::Error> for CliError {
    fn from(e: cutmixsl::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "cutmixsl", version, about = "Split learning with patch-wise random CutMix: privacy accounting, simulation and attacks")]
pub struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: config `output_dir`, else `results`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackName {
    Membership,
    LabelLeak,
    Reconstruction,
}

impl AttackName {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackName::Membership => "membership",
            AttackName::LabelLeak => "label_leak",
            AttackName::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Budgets of all three mechanisms for the configured parameters.
    Account,
    /// Run protocol rounds; writes metrics and the message trace.
    Simulate {
        /// Include full payloads in the trace.
        #[arg(long)]
        payloads: bool,
    },
    /// Run one attack over every sweep cell.
    Attack {
        #[arg(value_enum)]
        name: AttackName,
    },
    /// Run the oracle suites; exit code 4 on any failure.
    Verify,
    /// Evaluate every cell of the sweep grid.
    Sweep,
}

/// Parse-independent entry point used by `main` and the tests.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => config::ExperimentConfig::load(path)?,
        None => config::ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let ctx = output::Context::new(&cfg, out, cli.format, command_name(&cli.command));
    match &cli.command {
        Command::Account => commands::account(&cfg, &ctx),
        Command::Simulate { payloads } => commands::simulate(&cfg, &ctx, *payloads),
        Command::Attack { name } => commands::attack(&cfg, &ctx, *name),
        Command::Verify => verify::command(&cfg, &ctx),
        Command::Sweep => commands::sweep(&cfg, &ctx),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Account => "account",
        Command::Simulate { .. } => "simulate",
        Command::Attack { .. } => "attack",
        Command::Verify => "verify",
        Command::Sweep => "sweep",
    }
}
