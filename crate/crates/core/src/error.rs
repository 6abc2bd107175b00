use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },

    #[error("row {row} of softmax input has no finite entry")]
    NoValidKey { row: usize },

    #[error("infinite loss: zero probability for the target at position {position}")]
    InfiniteLoss { position: usize },

    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: String },

    #[error("context error: {0}")]
    Context(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("inconclusive: {0}")]
    Inconclusive(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
