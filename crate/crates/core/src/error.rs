use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range (expected 0 or 1)")]
    LabelOutOfRange { label: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("unknown hospital id {0}")]
    UnknownHospital(u16),

    #[error("config: {0}")]
    Config(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("network: {0}")]
    Network(#[from] std::io::Error),

    #[error("increment {increment}, round {round}, hospital {hospital}: {source}")]
    Context {
        increment: usize,
        round: usize,
        hospital: u16,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Distinguishes input problems from failures while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Protocol(_) | Error::Network(_) => false,
            Error::Context { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}
