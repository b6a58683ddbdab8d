use std::io;

use thiserror::Error;

pub type Result<T, E = MosaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MosaError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("length error: {0}")]
    Truncated(String),

    #[error("version error: file has version {found}, reader supports up to {supported}")]
    Version { found: u32, supported: u32 },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl MosaError {
    pub(crate) fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        MosaError::Numeric { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        MosaError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MosaError::Config(_) | MosaError::Dimension(_) | MosaError::Index(_) => 2,
            MosaError::Data(_)
            | MosaError::Format(_)
            | MosaError::Corruption(_)
            | MosaError::Truncated(_)
            | MosaError::Version { .. }
            | MosaError::Io { .. } => 3,
            MosaError::Numeric { .. } => 4,
            MosaError::Invariant(_) | MosaError::Internal(_) => 5,
        }
    }
}
