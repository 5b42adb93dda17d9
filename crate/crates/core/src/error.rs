use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`: not present in the encoder vocabulary")]
    UnknownToken(String),

    #[error("prompt has {len} tokens but the encoder accepts at most {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("label {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("non-finite loss ({value}) at optimizer step {step}")]
    NonFinite { step: usize, value: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnknownToken(_)
            | Error::ContextOverflow { .. }
            | Error::Dimension { .. }
            | Error::Parameter(_)
            | Error::Config(_)
            | Error::Lookup(_) => ErrorKind::Config,
            Error::Validation(_)
            | Error::Index { .. }
            | Error::Data(_)
            | Error::Format(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::NonFinite { .. } => ErrorKind::Numeric,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
