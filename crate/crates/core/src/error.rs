use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("index {index} out of range (bound {bound}) in {context}")]
    IndexOutOfRange {
        index: u64,
        bound: u64,
        context: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("solver diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("normal equations singular after jitter: numerical rank {rank} of {n}")]
    Singular { rank: usize, n: usize },

    #[error("collective protocol error on rank {rank}: {reason}")]
    Protocol { rank: usize, reason: String },

    #[error("collective '{operation}' timed out on rank {rank} after {secs:.1}s")]
    Timeout {
        operation: &'static str,
        rank: usize,
        secs: f64,
    },

    #[error("node {node}: {source}")]
    Node {
        node: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numerical,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_)
            | Error::Format(_)
            | Error::IndexOutOfRange { .. }
            | Error::DimensionMismatch(_)
            | Error::Domain(_)
            | Error::TooLarge(_) => ErrorKind::Data,
            Error::Diverged { .. } | Error::Singular { .. } => ErrorKind::Numerical,
            Error::Protocol { .. } | Error::Timeout { .. } => ErrorKind::Runtime,
            Error::Node { source, .. } => source.kind(),
        }
    }

    pub fn for_node(self, node: usize) -> Error {
        match self {
            e @ Error::Node { .. } => e,
            e => Error::Node {
                node,
                source: Box::new(e),
            },
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
