//! Experiment runner for the mean-field lazy-training lab: config parsing,
//! deterministic sweeps, and plot-ready CSV/JSON artifacts over
//! `meanfield-core`.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{CmdResult, RunContext};

#[derive(Debug, Parser)]
#[command(
    name = "meanfield-lab",
    about = "Numerical lab for entropy-regularized mean-field training of two-layer nets",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Path to the JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker-pool size for sweep points.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Output directory (the MEANFIELD_LAB_OUT env var takes precedence).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Run only checks whose names contain one of these substrings
    /// (verify only).
    #[arg(long, global = true, value_delimiter = ',')]
    pub only: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Boltzmann fixed point and verify the static bounds.
    Solve,
    /// Build the optimal drift and run the bridge diagnostics.
    Bridge,
    /// Simulate the four coupled processes and decompose the risk gaps.
    Dynamics,
    /// Transported-net quantile tables.
    Corollary1,
    /// Run the oracle suite; exit 0 iff every check passes.
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Bridge => "bridge",
            Command::Dynamics => "dynamics",
            Command::Corollary1 => "corollary1",
            Command::Verify => "verify",
        }
    }
}

/// Build the run context from CLI arguments; errors here are config errors.
pub fn context_from_cli(cli: &Cli) -> CmdResult<RunContext> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| commands::CmdError::Config(anyhow::anyhow!("--config PATH is required")))?;
    let text = std::fs::read_to_string(&config_path).map_err(|e| {
        commands::CmdError::Config(anyhow::anyhow!("reading {}: {e}", config_path.display()))
    })?;
    let config = config::ExperimentConfig::from_json(&text).map_err(commands::CmdError::Config)?;
    let out_root = artifacts::resolve_output_dir(cli.out.as_deref(), &config.output_dir);
    Ok(RunContext {
        config,
        out_root,
        seed_override: cli.seed,
        jobs: cli.jobs.max(1),
        only: cli.only.clone(),
    })
}

pub fn run(cli: &Cli) -> CmdResult<()> {
    let ctx = context_from_cli(cli)?;
    match cli.command {
        Command::Solve => commands::solve::run(&ctx),
        Command::Bridge => commands::bridge_cmd::run(&ctx),
        Command::Dynamics => commands::dynamics_cmd::run(&ctx),
        Command::Corollary1 => commands::corollary1_cmd::run(&ctx),
        Command::Verify => commands::verify::run(&ctx),
    }
}
