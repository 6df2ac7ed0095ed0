use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {got} in {context}")]
    ChannelMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("non-positive output extent for {op}: {detail}")]
    EmptyOutput { op: String, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArg { op: String, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("stale tape: parameters were mutated after the forward pass")]
    StaleTape,

    #[error("training aborted at iteration {iteration}: loss is non-finite ({loss})")]
    NonFiniteLoss { iteration: u64, loss: f64 },

    #[error("pnm decode error in {path}: {detail}")]
    Pnm { path: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}
