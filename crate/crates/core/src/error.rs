use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or raster dimensions that do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Caller-supplied data outside the accepted domain.
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values surfaced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Inconsistent stored state (checkpoint, EMA, optimizer).
    #[error("state error: {0}")]
    State(String),

    /// Incompatible combination of artifacts, e.g. a sampler for the wrong objective.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
