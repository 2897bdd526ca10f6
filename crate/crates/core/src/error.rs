use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the relrec library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("{what} references unknown entries: {}", offenders.join(", "))]
    UnknownEntries { what: String, offenders: Vec<String> },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("corrupted checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("could not sample {wanted} negatives after {tries} attempts")]
    PoolExhausted { wanted: usize, tries: usize },

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
