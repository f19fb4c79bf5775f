use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("field singularity at point {index}: coincides with an image source")]
    Singularity { index: usize },

    #[error("numerical error: {msg}")]
    Numerical { msg: String },

    #[error("duplicate training input at indices {first} and {second}")]
    DuplicateInput { first: usize, second: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("correlation undefined: truth or prediction is constant (mse {:.6e})", .0.mse)]
    CorrelationUndefined(Box<crate::evalsel::EvalReport>),

    #[error("network error: {0}")]
    Net(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical { msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the linear algebra or optimiser, as opposed to
    /// bad input data or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Optimization(_))
    }
}
