//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid {what}: {why}")]
    InvalidInput { what: String, why: String },

    #[error("dataset error at {path}: {why}")]
    Dataset { path: PathBuf, why: String },

    #[error("checkpoint error at {path}: {why}")]
    Checkpoint { path: PathBuf, why: String },

    #[error("training diverged at {stage} epoch {epoch}: {why}")]
    Diverged {
        stage: String,
        epoch: usize,
        why: String,
    },

    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn invalid(what: impl Into<String>, why: impl Into<String>) -> Self {
        Error::InvalidInput {
            what: what.into(),
            why: why.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
