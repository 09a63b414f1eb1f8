use conformer_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {detail}")]
    Config { field: &'static str, detail: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Config { field, detail: detail.into() }
    }
}
