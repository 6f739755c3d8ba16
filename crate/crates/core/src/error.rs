use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: shapes {shapes:?}")]
    Dimension {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite evaluation: {0}")]
    Evaluation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {term} = {value}")]
    Training {
        epoch: usize,
        batch: usize,
        term: &'static str,
        value: f64,
    },

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
