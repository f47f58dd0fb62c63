//! Seeded experiment runner: `evolve`, `gge`, `certify` and `selftest`.
//!
//! Each run writes into `<out>/<hash>/`, where `<hash>` is derived from the
//! subcommand and the resolved configuration. CSV files open with a
//! `# config: <json>` line and JSON files carry a `config` field, so every
//! output describes the run that produced it.

pub mod commands;
pub mod config;
pub mod selftest;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, Plan, Resolved};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Exists(String),
    #[error("selftest failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io { .. } | CliError::Exists(_) => 2,
            CliError::Selftest(_) => 3,
        }
    }
}

impl From<photherm::Error> for CliError {
    fn from(e: photherm::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}
