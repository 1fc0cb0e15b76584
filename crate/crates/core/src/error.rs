use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at index {index} of {what}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("invalid dose-influence matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid structure `{name}`: {reason}")]
    InvalidStructure { name: String, reason: String },
    #[error("invalid objective #{index}: {reason}")]
    InvalidObjective { index: usize, reason: String },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid bounds at index {index}: lo {lo} > hi {hi}")]
    InfeasibleBounds { index: usize, lo: f64, hi: f64 },
    #[error("phantom: {0}")]
    Phantom(String),
    #[error("container {path}: {reason}")]
    Container { path: PathBuf, reason: String },
    #[error("plan evaluation: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ProblemError> = std::result::Result<T, E>;

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ProblemError::NonFinite {
            what,
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
