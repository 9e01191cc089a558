//! Experiment harness for the `saferl` binary: configuration files, stage
//! commands with per-seed manifests, and SVG figures.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod svg;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<saferl_core::Error> for CliError {
    fn from(e: saferl_core::Error) -> Self {
        use saferl_core::Error as E;
        match e {
            E::NonFinite { .. } => CliError::Divergence(e.to_string()),
            E::InvalidArgument(_) | E::Infeasible(_) | E::Unsupported(_) => CliError::Config(e.to_string()),
            E::Parse { .. } | E::DimensionMismatch { .. } => CliError::Input(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json error: {e}"))
    }
}
