use thiserror::Error;

#[derive(Debug, Error)]
pub enum L2oError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("problem has {got} spots, more than the configured maximum of {max}; split the plan into smaller shards")]
    TooManySpots { got: usize, max: usize },
    #[error("objective layout: {0}")]
    Layout(String),
    #[error("feature assembly before any gradient was recorded (t = 0)")]
    NoGradientYet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Problem(#[from] pbs_core::ProblemError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = L2oError> = std::result::Result<T, E>;
