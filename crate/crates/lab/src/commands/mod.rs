//! Subcommand implementations. Each command resolves the config, writes
//! its artifacts under `<out>/<command>/`, and stamps the directory with
//! the resolved config and a provenance record.

use std::path::{Path, PathBuf};

use anyhow::Result;

use crate::artifacts::{write_json, Provenance};
use crate::config::ExperimentConfig;

pub mod bridge_cmd;
pub mod corollary1_cmd;
pub mod dynamics_cmd;
pub mod solve;
pub mod verify;

/// Error classification for process exit codes.
#[derive(Debug)]
pub enum CmdError {
    /// Bad config, bad arguments, missing prerequisite artifacts → exit 2.
    Config(anyhow::Error),
    /// Solver/simulation failures → exit 3.
    Numerical(anyhow::Error),
    /// Verification ran and found failing checks → exit 4.
    Verification(usize),
}

impl core::fmt::Display for CmdError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CmdError::Config(e) => write!(f, "configuration error: {e:#}"),
            CmdError::Numerical(e) => write!(f, "numerical failure: {e:#}"),
            CmdError::Verification(n) => write!(f, "{n} verification check(s) failed"),
        }
    }
}

impl std::error::Error for CmdError {}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Numerical(_) => 3,
            CmdError::Verification(_) => 4,
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

pub(crate) fn numerical<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Numerical(e.into())
}

pub(crate) fn config_err<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Config(e.into())
}

/// Common inputs threaded through every command.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub out_root: PathBuf,
    pub seed_override: Option<u64>,
    pub jobs: usize,
    pub only: Vec<String>,
}

impl RunContext {
    pub fn command_dir(&self, command: &str) -> PathBuf {
        self.out_root.join(command)
    }

    /// Write resolved config and provenance into a command directory.
    pub fn stamp(&self, dir: &Path, command: &str) -> Result<()> {
        let resolved_json = serde_json::to_string_pretty(&self.config)?;
        write_json(&dir.join("resolved_config.json"), &self.config)?;
        let seed = self.seed_override.unwrap_or(self.config.master_seed);
        write_json(&dir.join("provenance.json"), &Provenance::new(command, &resolved_json, seed))?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed_override.unwrap_or(self.config.master_seed)
    }

    /// Scoped rayon pool honoring `--jobs`.
    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}
