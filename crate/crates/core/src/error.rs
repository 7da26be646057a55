use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// The induced state chain has more than one communicating class.
    #[error("reducible chain: closed classes {closed_classes:?}, transient states {transient:?}")]
    Reducible {
        closed_classes: Vec<Vec<usize>>,
        transient: Vec<usize>,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("entropy undefined: policy assigns zero probability to action {action} in state {state}")]
    EntropyUndefined { state: usize, action: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
