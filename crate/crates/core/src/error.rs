use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record `{image_id}`: {reason}")]
    InvalidRecord { image_id: String, reason: String },

    #[error("cannot read image for `{image_id}`: {reason}")]
    ImageRead { image_id: String, reason: String },

    #[error("cannot write `{}`: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error on `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image data: {0}")]
    Codec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
