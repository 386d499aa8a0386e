use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MixcoError>;

#[derive(Debug, Error)]
pub enum MixcoError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A non-finite value reached an operation that requires finite input.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller broke an operation precondition (bad targets, stale trace, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite loss or gradient during optimization.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MixcoError {
    pub fn config(msg: impl Into<String>) -> Self {
        MixcoError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        MixcoError::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        MixcoError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MixcoError::Io {
            path: path.into(),
            source,
        }
    }
}
