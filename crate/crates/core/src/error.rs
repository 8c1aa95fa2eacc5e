//! Crate-wide error type.

/// Errors surfaced by tensor ops, loaders, the trainer and checkpoint IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A mask left no position to normalise or reduce over.
    #[error("{op}: invalid mask: {msg}")]
    InvalidMask { op: &'static str, msg: String },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is structurally valid but semantically unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error: {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An operation produced NaN or Inf.
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    /// Checkpoint file is malformed, truncated or of the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (divergence, non-finite gradient).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
