use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the temporal-range toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value encountered at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("episode already finished; reset before stepping")]
    EpisodeFinished,

    #[error(
        "training diverged at step {step}: loss {loss} exceeded 10x initial loss {initial} for 100 consecutive steps"
    )]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
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
}
