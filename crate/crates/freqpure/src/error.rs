//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// An argument is outside its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A batch carries the wrong value-range tag for the requested operation.
    #[error("range tag mismatch: expected {expected}, got {actual} — rescale before calling")]
    RangeTagMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// Attack optimization aborted; the trace collected so far is attached.
    #[error("attack aborted at iteration {iteration}: {cause}")]
    AttackAborted {
        iteration: usize,
        cause: String,
        trace: crate::attack::AttackTrace,
    },

    /// Model training diverged or finished below its quality floor.
    #[error("training failed: {message} (final validation metric {metric:.4})")]
    TrainingFailure {
        message: String,
        /// Final validation metric: accuracy % for classifiers, loss for
        /// score models.
        metric: f64,
        /// Per-epoch (train loss, validation metric) pairs for post-mortems.
        curve: Vec<(f64, f64)>,
    },

    /// A model checkpoint or manifest could not be used.
    #[error("model load error: {0}")]
    ModelLoad(String),

    /// A benchmark cell failed; the sweep records the cause and continues.
    #[error("evaluation cell failed: {0}")]
    CellFailure(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
