use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value {0} passed to estimator")]
    NonFinite(f64),

    #[error("insufficient data: need at least {needed} samples, have {have}")]
    InsufficientData { needed: u64, have: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
