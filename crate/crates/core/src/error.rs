use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to load dataset entry `{entry}`: {reason}")]
    Load { entry: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss during {phase} at epoch {epoch}: {report:?}")]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        report: Box<LossReport>,
    },

    #[error("no valid retrieval queries: every query's class has a single member")]
    EmptyRetrieval,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
