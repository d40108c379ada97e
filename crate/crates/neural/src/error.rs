use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value produced by {op} in {layer}")]
    NonFinite { layer: String, op: &'static str },

    #[error("unknown parameter {0:?}")]
    MissingParam(String),

    #[error("duplicate parameter path {0:?}")]
    DuplicateParam(String),

    #[error("no gradient supplied for parameter {0:?}")]
    MissingGrad(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("checkpoint error at byte {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;
