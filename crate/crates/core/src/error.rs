use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Parse,
    Numerical,
    InsufficientData,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular model at step {step}: {what}")]
    SingularModel { step: usize, what: String },

    #[error("gate covariance is not positive definite after regularization")]
    SingularGate,

    #[error("metric covariance is not positive definite after regularization")]
    SingularMetric,

    #[error("kinematic template has zero norm")]
    DegenerateTemplate,

    #[error("EM diverged after {} iterations (log-likelihood trace {log_likelihoods:?})", log_likelihoods.len())]
    EmDivergence { log_likelihoods: Vec<f64> },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{rejected} of {total} rows failed validation")]
    TooManyRejections { rejected: usize, total: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Serialization(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) => ErrorKind::Config,
            Error::DimensionMismatch(_)
            | Error::SingularModel { .. }
            | Error::SingularGate
            | Error::SingularMetric
            | Error::DegenerateTemplate
            | Error::EmDivergence { .. } => ErrorKind::Numerical,
            Error::InsufficientData(_) => ErrorKind::InsufficientData,
            Error::Schema(_)
            | Error::TooManyRejections { .. }
            | Error::Parse(_)
            | Error::Io { .. }
            | Error::Serialization(_) => ErrorKind::Parse,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
