//! Error types shared by every simulator module.

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, dimension mismatch, or violated precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric quantity left its valid range (NaN/Inf loss, etc.).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Assignment-matrix construction could not satisfy its checks.
    #[error("matrix construction failed: {0}")]
    Construction(String),

    /// The request exceeds what the implementation can compute exactly.
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// A method declared private tried to read per-client updates, or a
    /// non-private method ran against a redacted record.
    #[error("privacy boundary violation: {0}")]
    PrivacyBoundary(String),

    /// The comprehensive detect-then-score pipeline cannot continue.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Filesystem failure while reading configs or emitting results.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file (config, manifest, matrix, or CSV dataset).
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
