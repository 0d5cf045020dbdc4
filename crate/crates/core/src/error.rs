use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input could not be parsed; `locus` points at the offending line/record.
    #[error("format error at {locus}: {message}")]
    Format { locus: String, message: String },

    #[error("validation error in dialog {dialog}: {message}")]
    Validation { dialog: String, message: String },

    #[error("invalid ontology: {0}")]
    Ontology(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (last good checkpoint: {checkpoint})")]
    Diverged { step: usize, checkpoint: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
