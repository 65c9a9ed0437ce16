use std::path::PathBuf;

use crate::ParamVector;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("subproblem did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Box<ParamVector>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("inapplicable: {0}")]
    Inapplicable(String),

    #[error("bounded delay violated at t={t}: worker {worker} last arrived at {last_arrival} (tau={tau})")]
    BoundedDelay {
        t: usize,
        worker: usize,
        last_arrival: usize,
        tau: usize,
    },

    #[error("stale gradient of worker {worker} does not match its iterate at t={t}")]
    StaleGradient { t: usize, worker: usize },

    #[error("injected error at t={t} violates the residual bound: {error_sq:.3e} >= c1*{prev_delta_sq:.3e}")]
    InexactBound {
        t: usize,
        error_sq: f64,
        prev_delta_sq: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn spec(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
