use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty after filtering")]
    EmptyDataset,
    #[error("id {id} out of range (valid ids are 1..={max})")]
    IdOutOfRange { id: usize, max: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
