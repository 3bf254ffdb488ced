use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the toolkit, grouped by process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(capsgraph_core::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("shape mismatch in block `{block}`: {detail}")]
    ShapeMismatch { block: String, detail: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("vocabulary does not match checkpoint: {0}")]
    Vocabulary(String),
}

impl From<capsgraph_core::Error> for Error {
    fn from(e: capsgraph_core::Error) -> Self {
        match e {
            capsgraph_core::Error::NonFinite { .. } => Error::Numeric(e.to_string()),
            capsgraph_core::Error::InvalidConfig(msg) => Error::Config(msg),
            other => Error::Model(other),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 ok, 1 config, 2 data or IO, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Model(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
