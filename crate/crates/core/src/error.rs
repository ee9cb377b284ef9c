use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition (empty input, shape mismatch, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent configuration: missing artifacts, fingerprint mismatch, bad flags.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data: corpus records, lexicon rows, binary file payloads.
    #[error("data error: {0}")]
    Data(String),

    /// A token sequence that does not have quatrain structure.
    #[error("structure error: {0}")]
    Structure(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Structure(_) | Error::Diverged(_) | Error::Io { .. } => 3,
        }
    }
}
