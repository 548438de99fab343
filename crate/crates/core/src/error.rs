use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("size mismatch: header declares {declared} payload bytes, file holds {actual}")]
    SizeMismatch { declared: u64, actual: u64 },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported Walsh-Hadamard size {0}: no 2^k * m factorization with a bundled Hadamard factor")]
    UnsupportedWhtSize(usize),

    #[error("invalid sparse index: {0}")]
    InvalidIndex(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the CLI exit-code contract.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;
