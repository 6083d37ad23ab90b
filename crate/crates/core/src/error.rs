use thiserror::Error;

/// Errors raised by the model, training and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("graph wiring error: {0}")]
    Wiring(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("gradient check failed at {path}: {detail}")]
    GradCheck { path: String, detail: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
