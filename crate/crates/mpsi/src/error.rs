//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that were required to agree (or broadcast) did not.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation was called outside its contract (bad axis, empty
    /// sequence, non-scalar loss, ...).
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid model or run configuration.
    #[error("config: {0}")]
    Config(String),

    /// Malformed or mismatched checkpoint data.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decode/encode failure or unsupported pixel layout.
    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    /// Training produced a non-finite loss; `provenance` identifies the
    /// offending batch (source image, patch offset, augmentation code).
    #[error("non-finite loss at iteration {iteration}; batch provenance: {provenance:?}")]
    NonFiniteLoss {
        iteration: u64,
        provenance: Vec<String>,
    },
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
