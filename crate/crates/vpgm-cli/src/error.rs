//! Error taxonomy and exit-code mapping.
//!
//! Exit codes: 2 for configuration and usage problems, 3 for provider
//! failures, 4 for validation failures (bad data, rejected structures,
//! digest mismatches), 1 for anything else.

use std::path::Path;

use vpgm::calibrate::CalibrateError;
use vpgm::engine::EngineError;
use vpgm::gateway::GatewayError;
use vpgm::graph::GraphError;
use vpgm::metrics::MetricsError;
use vpgm::prompt::PromptError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Provider(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Validation(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(context: &str, path: &Path, err: std::io::Error) -> Self {
        CliError::Other(format!("{context} {}: {err}", path.display()))
    }
}

impl From<GatewayError> for CliError {
    fn from(err: GatewayError) -> Self {
        match err {
            GatewayError::InvalidConfig(_) | GatewayError::Script { .. } => {
                CliError::Config(err.to_string())
            }
            other => CliError::Provider(other.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(err: PromptError) -> Self {
        match err {
            PromptError::TemplateRead { .. }
            | PromptError::UnresolvedPlaceholder { .. }
            | PromptError::InvalidSpec(_) => CliError::Config(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(err: EngineError) -> Self {
        match err {
            EngineError::Io { .. } => CliError::Other(err.to_string()),
            EngineError::AllSamplesUnparseable { .. } => CliError::Provider(err.to_string()),
            EngineError::Prompt(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CalibrateError> for CliError {
    fn from(err: CalibrateError) -> Self {
        CliError::Validation(err.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(err: MetricsError) -> Self {
        CliError::Validation(err.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(err: GraphError) -> Self {
        CliError::Validation(err.to_string())
    }
}
