//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value detected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// Triplet sampling cannot proceed on the given label set.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Support-set construction cannot satisfy the requested k.
    #[error("support error: {0}")]
    Support(String),

    /// An index referenced data that does not exist.
    #[error("index error: {0}")]
    Index(String),

    /// A label was outside the declared class range.
    #[error("label error: {0}")]
    Label(String),

    /// A checkpoint file is corrupt, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A dataset record could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// The unseen-class evaluation protocol was violated.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
