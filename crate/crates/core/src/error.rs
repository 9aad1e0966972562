use std::io;

/// Errors raised by the model, data, and training code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid attention mask: {0}")]
    InvalidMask(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    Vocab { id: usize, vocab_size: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing modality: {0}")]
    Modality(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
