use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the encoder pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bad tensor magic {found:?}, expected \"A3RT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor version {0}")]
    BadVersion(u8),

    #[error("tensor dtype mismatch: file holds {found}, requested {expected}")]
    DtypeMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("truncated tensor payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor shape error: {0}")]
    Shape(String),

    #[error("no valid points remain in the cloud")]
    NoValidPoints,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called without a cached forward pass")]
    MissingForwardCache,

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
