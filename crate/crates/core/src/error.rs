use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, task, stream or selector configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-side contract was violated (empty batch, missing labels, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A forward pass produced NaN or infinity.
    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },

    /// Supervised training diverged.
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Shape bookkeeping went wrong between live parameters, anchors and proposals.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A statistic has no defined value for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
