use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis had the wrong size for the operation.
    #[error("dimension error in {op}: axis {axis} ({name}) expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: usize,
        name: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("rank error in {op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("cannot broadcast shapes {left:?} and {right:?}")]
    Broadcast { left: Vec<usize>, right: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("staging error: {0}")]
    Staging(String),

    #[error("training diverged in stage {stage}, epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        stage: String,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{} is not a weight file (bad magic {found:?})", path.display())]
    WeightMagic { path: PathBuf, found: Vec<u8> },

    #[error("{}: unsupported weight format version {found} (expected {expected})", path.display())]
    WeightVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated file {}: {msg}", path.display())]
    Truncated { path: PathBuf, msg: String },

    #[error("shape mismatch for tensor '{name}': file has {found:?}, model expects {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 numerical failure, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numerical(_) | Error::DegenerateEmbedding(_) => 2,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Truncated { .. }
            | Error::WeightMagic { .. }
            | Error::WeightVersion { .. } => 3,
            _ => 1,
        }
    }
}
