use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, empty input, bad id).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity surfaced inside a computation.
    #[error("numerical error at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Minimal-pair generation could not find a valid negative.
    #[error("generation error at pair {index}: {msg}")]
    Generation { index: usize, msg: String },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub(crate) fn ensure_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{what}: dimension mismatch ({a} vs {b})")));
    }
    Ok(())
}
