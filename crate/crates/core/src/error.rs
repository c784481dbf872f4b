use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid UTF-8 input: {0}")]
    Decode(#[from] std::string::FromUtf8Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown tokenizer scheme `{0}`")]
    UnknownScheme(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention mask row {row} allows no keys")]
    EmptyMaskRow { row: usize },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("all target positions are ignored")]
    NoTargets,

    #[error("sequence of {len} tokens exceeds the context budget of {budget}")]
    OverBudget { len: usize, budget: usize },

    #[error("corpus of {available} units is shorter than one block of {block}")]
    CorpusTooShort { available: usize, block: usize },

    #[error("scheme mismatch: checkpoint uses {checkpoint}, requested {requested}")]
    SchemeMismatch { checkpoint: String, requested: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
