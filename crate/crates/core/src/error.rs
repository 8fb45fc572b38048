use thiserror::Error;

/// Error taxonomy shared across the workspace.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// An object was used in an invalid state (e.g. backward twice on one tape).
    #[error("state error: {0}")]
    State(String),

    /// Caller-supplied data is invalid.
    #[error("input error: {0}")]
    Input(String),

    /// Configuration is invalid or inconsistent with a checkpoint.
    #[error("config error: {0}")]
    Config(String),

    /// A training run hit its epoch cap below the required quality gate.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("file error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
