use thiserror::Error;

pub type Result<T> = std::result::Result<T, MeltError>;

#[derive(Debug, Error)]
pub enum MeltError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("covariance not positive definite")]
    NotPositiveDefinite,
    #[error("tape consumed")]
    TapeConsumed,
    #[error("gradient overflow in parameter {0}")]
    GradientOverflow(String),
    #[error("stats frozen")]
    StatsFrozen,
    #[error("not an embedding bank")]
    NotABank,
    #[error("corrupt bank: {0}")]
    CorruptBank(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("nonfinite loss: {0}")]
    Divergence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MeltError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MeltError::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MeltError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        MeltError::Data(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MeltError::InvalidArgument(msg.into())
    }
}
