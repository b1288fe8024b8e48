use std::path::PathBuf;

use icq_core::dataset::DatasetError;
use icq_core::error_analysis::AnalysisError;
use icq_core::learners::LearnerError;
use icq_core::mdp::MdpError;
use icq_core::operators::OperatorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed config document; `location` names the field path and line.
    #[error("{path}: {location}: {message}")]
    ConfigParse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{0}: no data points to plot")]
    EmptySeries(PathBuf),
    #[error("unknown verification suite `{0}`")]
    UnknownSuite(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        LabError::Csv {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
