use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value produced by {what}")]
    NonFinite { what: String },

    #[error("gradient check aborted: {0}")]
    NonDeterministic(String),

    #[error("tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract { op, detail: detail.into() }
    }
}
