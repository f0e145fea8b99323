use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("max-pool 2x2 needs even spatial dims, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },

    #[error("pool index {offset} at output element {element} does not address a cell of its 2x2 window")]
    CorruptIndices { element: usize, offset: u8 },

    #[error("batch norm over an empty batch")]
    EmptyBatch,

    #[error("label {label} at pixel {pixel} is out of range for {classes} classes")]
    LabelOutOfRange {
        label: u8,
        pixel: usize,
        classes: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called without a preceding training-mode forward")]
    MissingForward,

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("no valid depth pixels in region")]
    EmptyRegion,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("training diverged at step {step}")]
    Diverged {
        step: u64,
        last_good: Box<Checkpoint>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn expect_dim(
    op: &'static str,
    dim: &'static str,
    expected: usize,
    actual: usize,
) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        })
    }
}
