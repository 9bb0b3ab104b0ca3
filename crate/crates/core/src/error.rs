use thiserror::Error;

/// Errors raised across the retrieval, reward, policy and bridge layers.
#[derive(Debug, Error)]
pub enum GrapeError {
    #[error("cannot normalize a zero or non-finite vector")]
    Normalization,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("target item {0} is not in the index")]
    TargetNotFound(u64),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("infeasible testbed geometry: {0}")]
    Geometry(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("adapter did not answer within {0} ms")]
    Timeout(u64),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GrapeError>;

pub(crate) fn param(msg: impl Into<String>) -> GrapeError {
    GrapeError::Parameter(msg.into())
}
