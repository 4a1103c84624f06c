use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum PviError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: non-positive pivot at index {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite value in Monte Carlo term (sample {l}, particle {m}): {what}")]
    Estimator { l: usize, m: usize, what: String },

    #[error("diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PviError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        PviError::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PviError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, PviError>;
