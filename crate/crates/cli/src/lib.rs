//! Reproducible experiments over the `digest-core` training engine.
//!
//! Each command reads an [`spec::ExperimentSpec`] and writes its artifacts to
//! an output directory: `train` produces metrics, checkpoints and a summary,
//! `compare` lines up the full-graph, sync and async runs on simulated time,
//! and `analyze` checks a finished run against the bound and the cost model.

pub mod commands;
pub mod spec;

use digest_core::engine::EngineError;
use thiserror::Error;

pub use commands::{cmd_analyze, cmd_compare, cmd_train, AnalysisReport, CompareReport, RunSummary};
pub use spec::{load_spec, parse_spec, ExperimentSpec, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad spec, flags or input files.
    #[error("{0}")]
    Spec(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Spec(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Mismatch(_) => CliError::Spec(e.to_string()),
            EngineError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}
