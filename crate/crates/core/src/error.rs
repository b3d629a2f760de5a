use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GaitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("range image has no subject pixels")]
    EmptySubject,

    #[error("sequence has no usable frames")]
    EmptySequence,

    #[error("subject at {distance:.2} m is outside the {max:.1} m capture range")]
    OutOfRange { distance: f64, max: f64 },

    #[error("non-finite loss at iteration {iteration} (batch: {batch})")]
    NonFiniteLoss { iteration: usize, batch: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GaitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GaitError::Io {
            path: path.into(),
            source,
        }
    }
}
