use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("cannot parse cell at row {row}, column {column} ({name}): {value:?}")]
    BadCell {
        row: usize,
        column: usize,
        name: String,
        value: String,
    },

    #[error("response column {0:?} not found")]
    MissingResponse(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("index {index} out of range for {len} columns")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("degenerate zero-estimator: index set has {0} element(s), need at least 2")]
    DegenerateZeroEstimator(usize),

    #[error("need at least {needed} observations, have {have}")]
    TooFewObservations { needed: usize, have: usize },

    #[error("data must be whitened before this operation")]
    NotWhitened,

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("least squares design is rank deficient ({rank} < {p}); prune collinear columns first")]
    RankDeficient { rank: usize, p: usize },

    #[error("external estimator failed: {0}")]
    External(String),

    #[error("bad cache file: {0}")]
    BadCache(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
