use std::path::PathBuf;

use crate::model::Label;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
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

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("insufficient {class} examples: need {needed}, have {available}")]
    InsufficientClass {
        class: Label,
        needed: usize,
        available: usize,
    },

    #[error("sample size {requested} exceeds pool size {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("no display name for code {0}")]
    UnknownCode(String),

    #[error("unknown example id {0}")]
    UnknownExample(String),

    #[error("template error: {0}")]
    Template(String),

    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),

    #[error("{failed} of {total} predictions failed, above the {ceiling} failure ceiling")]
    FailureCeiling {
        failed: usize,
        total: usize,
        ceiling: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
