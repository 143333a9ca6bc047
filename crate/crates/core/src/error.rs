//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UfoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("degenerate channels (zero l1 mass over the horizon): {0:?}")]
    DegenerateChannel(Vec<usize>),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UfoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        UfoError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, UfoError>;
