use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward called twice without a new forward pass")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape is empty")]
    EmptyTape,
    #[error("parameter used in an op that cannot split gradients by segment: {0}")]
    PerSegmentUnsupported(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("span error: {0}")]
    Span(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("missing group annotations for group_dro")]
    MissingGroups,
    #[error("empty sample set for {0}")]
    Empty(&'static str),
    #[error("zero variance in pearson input")]
    ZeroVariance,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
