use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    NearZeroNorm { norm: f64 },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("prototype rejection sampling exhausted after {rounds} rounds")]
    PrototypeRejectionExhausted { rounds: usize },

    #[error("sinkhorn did not converge: marginal error {error:e} > tol {tol:e} after {iters} iterations")]
    NonConvergence { error: f64, tol: f64, iters: usize },

    #[error("detector training set is empty")]
    EmptyTrainingSet,

    #[error("contingency table is empty")]
    EmptyTable,

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stale artifact for stage `{stage}`: expected hash {expected}, found {found}")]
    StaleArtifact {
        stage: String,
        expected: String,
        found: String,
    },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
