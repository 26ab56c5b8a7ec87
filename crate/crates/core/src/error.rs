use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation
    /// (negative time, non-positive sampling rate, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent shapes or otherwise malformed inputs.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("malformed container: {0}")]
    Format(String),

    /// The objective became non-finite. `last_finite` is the last step whose
    /// loss was finite, if any.
    #[error("loss diverged at step {step} (last finite step: {last_finite:?})")]
    Diverged {
        step: usize,
        last_finite: Option<usize>,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
