use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutoplanError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid action: {0}")]
    Action(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Problem(#[from] pbs_core::ProblemError),
    #[error(transparent)]
    L2o(#[from] pbs_l2o::L2oError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AutoplanError>;
