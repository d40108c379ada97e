use branchgen_neural::NeuralError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid maze: {0}")]
    Maze(String),

    #[error("invalid environment state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset file error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error(transparent)]
    Neural(#[from] NeuralError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
