use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgError {
    /// Inconsistent shapes or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A reduction had nothing to reduce over (e.g. zero batch-spatial elements per channel).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An operation was invoked in the wrong lifecycle state (e.g. inference before gate stats are frozen).
    #[error("state error: {0}")]
    State(String),

    #[error("missing forward context for backward pass in {0}")]
    MissingContext(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss or gradient (loss = {loss})")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CgError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CgError {
    CgError::Config(msg.into())
}
