use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QaError {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown entity id {0}")]
    UnknownEntity(usize),
    #[error("unknown triple id {0}")]
    UnknownTriple(usize),
    #[error("k-hop expansion needs a non-empty core set")]
    EmptyCore,
    #[error("k-hop expansion needs K >= 1, got {0}")]
    BadHops(usize),
    #[error("empty question")]
    EmptyQuestion,
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("invalid config value for {key}: {message}")]
    InvalidConfig { key: String, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, QaError>;

impl QaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category tag for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            QaError::Diff(_) => "E_NUMERIC",
            QaError::Io { .. } => "E_IO",
            QaError::Parse { .. } => "E_PARSE",
            QaError::UnknownEntity(_) | QaError::UnknownTriple(_) => "E_LOOKUP",
            QaError::EmptyCore | QaError::BadHops(_) | QaError::EmptyQuestion => "E_INPUT",
            QaError::UnknownConfigKey(_) | QaError::InvalidConfig { .. } => "E_CONFIG",
            QaError::Dataset(_) => "E_DATASET",
            QaError::Diverged { .. } => "E_DIVERGED",
            QaError::Model(_) => "E_MODEL",
        }
    }
}
