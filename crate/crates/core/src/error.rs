use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("{0} on empty input")]
    EmptyInput(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse error families, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. }
            | Error::EmptyInput(_)
            | Error::Config(_)
            | Error::Contract(_) => ErrorKind::Usage,
            Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Checksum { .. }
            | Error::Io(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::NonFiniteGradient { .. } | Error::Determinism { .. } => {
                ErrorKind::Numeric
            }
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
