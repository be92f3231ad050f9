use thiserror::Error;

use crate::solver::MeanModel;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (bad indices, shapes, config values).
    #[error("input error: {0}")]
    Input(String),

    /// A factorization or linear solve failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iterative solver ran out of iterations. Carries the last iterate.
    #[error("no convergence after {iterations} iterations (last objective {objective:.6e})")]
    Convergence {
        iterations: usize,
        objective: f64,
        last: Option<Box<MeanModel>>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Convergence { .. } => 3,
            Error::Input(_) | Error::Io { .. } | Error::Json(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
