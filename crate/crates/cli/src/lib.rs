//! Command-line front end: config loading, the subcommands, and SVG plots.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Report;
pub use config::ExperimentConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "deq", version, about = "Equilibrium-model training and kernel diagnostics")]
pub struct Cli {
    /// TOML experiment config; every key has a default.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set model.m=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or load a dataset and write it as CSV.
    GenData,
    /// Population kernel, its least eigenvalue, and suggested width/depth.
    Kernel,
    /// Evaluate the initialization condition at the configured init.
    Check {
        /// Replace the labels by the initial predictions.
        #[arg(long)]
        zero_residual: bool,
    },
    /// Run gradient descent with monitoring.
    Train,
    /// Concentration experiments.
    Concentration {
        #[command(subcommand)]
        mode: Option<ConcentrationMode>,
    },
    /// Compare implicit gradients with finite differences.
    GradCheck {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConcentrationMode {
    /// Check the fresh-randomness reconstruction for one pair of columns.
    Reconstruct {
        #[arg(long, default_value_t = 0)]
        i: usize,
        #[arg(long, default_value_t = 1)]
        j: usize,
        #[arg(long, default_value_t = 3)]
        l: usize,
    },
}

pub fn run(cli: &Cli) -> Result<Report, CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Kernel => commands::kernel_cmd(&cfg),
        Command::Check { zero_residual } => commands::check(&cfg, *zero_residual),
        Command::Train => commands::train_cmd(&cfg),
        Command::Concentration { mode: None } => commands::concentration(&cfg),
        Command::Concentration {
            mode: Some(ConcentrationMode::Reconstruct { i, j, l }),
        } => commands::reconstruct(&cfg, *i, *j, *l),
        Command::GradCheck { corrupt } => commands::grad_check(&cfg, *corrupt),
    }
}

/// Parses arguments and runs; used by tests to drive the CLI in-process.
pub fn run_args<I, S>(args: I) -> Result<Report, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(&cli)
}
