use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("load error: {tensor}: {reason}")]
    Load { tensor: String, reason: String },
    #[error("logic error: {0}")]
    Logic(String),
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    pub(crate) fn logic(msg: impl Into<String>) -> Self {
        Error::Logic(msg.into())
    }

    pub(crate) fn load(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load { tensor: tensor.into(), reason: reason.into() }
    }
}
