use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value failed validation; `path` is a JSON path such as `$.noise.alpha`.
    #[error("{path}: {message}")]
    Validation { path: String, message: String },

    #[error("quadrature did not converge{context}: achieved error estimate {error:.3e}")]
    Quadrature { error: f64, context: String },

    #[error("covariance matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:.3e}")]
    Indefinite { min_eigenvalue: f64 },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("nonlinearity overflowed (pre-blow-up signal)")]
    Overflow,

    /// A run finished but one of its post-run checks failed.
    #[error("invariant failure: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 for bad input, 2 for failed numerics or
    /// invariants, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Validation { .. } => 1,
            Error::Quadrature { .. }
            | Error::Indefinite { .. }
            | Error::GridMismatch
            | Error::Overflow
            | Error::Invariant(_) => 2,
            Error::Io { .. } | Error::Json(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
