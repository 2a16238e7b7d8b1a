use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("coverage error: class {class} missing from {domain} centroids")]
    Coverage { class: usize, domain: &'static str },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
