use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, extents, ranges).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("invalid architecture string {input:?}: {msg} at index {index}")]
    ArchParse {
        input: String,
        index: usize,
        msg: String,
    },

    #[error("{op} is not available in {mode} mode")]
    UnsupportedMode { op: &'static str, mode: &'static str },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("format error in {path:?} at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("generator failed after {tries} tries: {msg}")]
    Generation { tries: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }
}

/// Early-return a contract violation when `cond` does not hold.
macro_rules! ensure {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract($op, format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
