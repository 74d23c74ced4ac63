use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration invariant failed; `field` names the offending key.
    #[error("invalid config: {field}: {message}")]
    Config { field: &'static str, message: String },

    /// A token or sequence violated a model precondition.
    #[error("model error: {0}")]
    Model(String),

    /// Two parameter vectors did not share a shape.
    #[error("shape mismatch: expected {expected} scalars, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    /// A loss evaluation or gradient produced NaN or infinity.
    #[error("non-finite {what} in batch {batch_id}")]
    NonFinite { what: &'static str, batch_id: usize },

    /// A divergence was infinite because the teacher put zero mass where the student did not.
    #[error("infinite divergence: teacher assigns zero probability to student-supported index {index}")]
    InfiniteDivergence { index: usize },

    /// Inputs to a pure routine were inconsistent (empty, misaligned).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A data file did not match its schema.
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            field,
            message: message.into(),
        }
    }
}
