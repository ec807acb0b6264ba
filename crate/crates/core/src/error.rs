use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("max-margin problem is infeasible (dual lower bound {dual_bound:.3e} after {sweeps} sweeps)")]
    Infeasible { dual_bound: f64, sweeps: usize },

    #[error("instance too large for exhaustive oracle: {constraints} constraints (limit {limit})")]
    TooLarge { constraints: usize, limit: usize },

    #[error("eigensolver did not converge for eigenpair {index}: residual {residual:.3e} after {iterations} iterations")]
    EigenNonConvergence {
        index: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },

    #[error("dataset lacks retained noise vectors")]
    MissingNoise,

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("content hash mismatch for {path}: manifest {expected}, computed {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
