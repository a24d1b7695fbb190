use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by `qnn-core`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid rotation key: {0}")]
    InvalidKey(String),

    #[error("quaternion is not a unit rotor (norm {0})")]
    NonUnitRotor(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version: {0}")]
    Version(String),

    #[error("corrupt or truncated file: {0}")]
    Corrupt(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by unreadable or mismatched file formats.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. } | Error::Version(_) | Error::Corrupt(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
