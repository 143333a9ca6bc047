//! Command failures and their exit codes.

use thiserror::Error;
use ufo_core::UfoError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config, paths or inputs; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Divergence or another numeric failure; exit code 3.
    #[error("{0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<UfoError> for CliError {
    fn from(e: UfoError) -> Self {
        match e {
            UfoError::TrainingDiverged(_)
            | UfoError::IntegrationDiverged { .. }
            | UfoError::NumericFailure(_)
            | UfoError::DegenerateModel(_)
            | UfoError::DegenerateProbe(_) => CliError::Numeric(e.to_string()),
            UfoError::Internal(m) => CliError::Internal(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("i/o error: {e}"))
    }
}
