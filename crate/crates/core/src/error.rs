use thiserror::Error;

/// Errors raised anywhere in the ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} (batch {batch}): bce={bce}, kl={kl}")]
    NonFiniteLoss {
        step: usize,
        batch: usize,
        bce: f64,
        kl: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
