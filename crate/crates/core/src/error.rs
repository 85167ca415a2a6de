use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    #[error("estimator update is ill-conditioned: {0}")]
    Conditioning(String),

    #[error("scenario {scenario}, step {step}: {source}")]
    AtStep {
        scenario: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("solver callback failed at outer iteration {outer}: {source}")]
    Solver {
        outer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, scenario: usize, step: usize) -> Self {
        Error::AtStep {
            scenario,
            step,
            source: Box::new(self),
        }
    }
}
