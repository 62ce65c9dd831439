use thiserror::Error;

use crate::tuning::TuningRecord;

pub type Result<T, E = LseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LseError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity exceeded: requested {requested}, only {available} available")]
    Capacity { requested: usize, available: usize },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("tuning failed: all {} candidates diverged", records.len())]
    TuningFailed { records: Vec<TuningRecord> },

    #[error("covariance not positive definite even with jitter {jitter:e}")]
    Numerical { jitter: f64 },

    #[error("division by zero: {0}")]
    Division(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<LseError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LseError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LseError::InvalidInput(msg.into())
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        LseError::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
