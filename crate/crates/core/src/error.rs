use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("loss diverged at step {step} (loss = {loss})")]
    DivergedLoss { step: usize, loss: f64 },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("channel partition does not match layer: {0}")]
    PartitionMismatch(String),

    #[error("need {requested} distinct points, only {available} available")]
    TooFewDistinctPoints { requested: usize, available: usize },

    #[error("Hessian diagonal entry {index} is not positive ({value:e})")]
    ZeroDiagonal { index: usize, value: f64 },

    #[error("problem too large for brute force: {0}")]
    TooLarge(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// Strips any `Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
