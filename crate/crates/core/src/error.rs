use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two link endpoints coincide.
    #[error("degenerate link: source and receiver coincide at {0:?}")]
    DegenerateLink([f64; 3]),

    /// The human footprint does not fit inside the room.
    #[error("placement error: human at ({x}, {y}) leaves the room")]
    Placement { x: f64, y: f64 },

    /// A cached artifact does not belong to the scene it is used with.
    #[error("invalidation error: expected scene digest {expected}, found {found}")]
    Invalidation { expected: String, found: String },

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
