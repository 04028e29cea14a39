//! Crate-wide error type.

use thiserror::Error;

/// Coarse classification used by callers (the CLI maps these to exit codes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Misconfiguration: incompatible dimensions, contract misuse.
    Config,
    /// Bad or missing input data: parse failures, unknown names, I/O.
    Data,
    /// Non-finite values produced during computation.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Validation(String),
    #[error("unknown {kind} {name:?}")]
    Lookup { kind: &'static str, name: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shape error with uniform formatting.
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::Contract(_) => ErrorKind::Config,
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Lookup { .. }
            | Error::Version { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
