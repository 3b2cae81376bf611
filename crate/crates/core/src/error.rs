use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid peg shape `{id}`: {reason}")]
    InvalidShape { id: String, reason: String },
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("action contains a non-finite component: {0:?}")]
    NonFiniteAction([f64; 3]),
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("modality set is empty")]
    EmptyModalities,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] m3l_autograd::Error),
    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
