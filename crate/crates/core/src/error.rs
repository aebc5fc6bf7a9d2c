use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}: depth map has no valid pixels")]
    AllInvalid(String),

    #[error("empty supervision mask")]
    EmptyMask,

    #[error("loss diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("unknown loss term {0:?} (expected sleeve, cycle, false_edge or tv)")]
    UnknownLoss(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
