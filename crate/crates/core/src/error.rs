use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("undeclared task \"{task}\" on entry \"{entry}\"")]
    UndeclaredTask { task: String, entry: String },
    #[error("duplicate id \"{0}\"")]
    DuplicateId(String),
    #[error("invalid label for task \"{task}\" on entry \"{entry}\": {reason}")]
    InvalidLabel {
        task: String,
        entry: String,
        reason: String,
    },
    #[error("empty class after split: {0}")]
    EmptyClass(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate mask: {masked} of {total} patches masked")]
    DegenerateMask { masked: usize, total: usize },
    #[error("anomaly off-bone: {0}")]
    AnomalyOffBone(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("AUROC undefined: {0}")]
    AurocUndefined(String),
    #[error("unknown task \"{0}\"")]
    UnknownTask(String),
    #[error("missing label for task \"{task}\" on entry \"{entry}\"")]
    MissingLabel { task: String, entry: String },
    #[error("empty scope: {0}")]
    EmptyScope(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
