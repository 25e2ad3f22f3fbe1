use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer dimension mismatch. `op` names the operation that rejected its inputs.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// NaN or infinity where a finite value is required (divergence, bad gradients).
    #[error("non-finite value: {context}")]
    NonFinite { context: String },

    /// Operation requires prototype push provenance that is not present.
    #[error("prototype {prototype} has no push provenance")]
    MissingProvenance { prototype: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
