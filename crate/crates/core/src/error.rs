use thiserror::Error;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid width: {0}")]
    InvalidWidth(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {token} out of vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DstError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DstError {
    DstError::Shape {
        op,
        detail: detail.into(),
    }
}
