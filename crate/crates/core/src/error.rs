//! Error type shared by every module.

use thiserror::Error;

/// All failures surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("duplicate head ({layer}, {head})")]
    DuplicateHead { layer: usize, head: usize },
    #[error("unknown channel group `{0}`")]
    UnknownGroup(String),
    #[error("invalid head spec: {0}")]
    InvalidSpec(String),
    #[error("invalid head coordinate ({layer}, {head})")]
    InvalidHead { layer: usize, head: usize },
    #[error("capacity: {objects} objects do not fit in {cells} cells")]
    Capacity { objects: usize, cells: usize },
    #[error("template `{template}` is not applicable: {reason}")]
    Inapplicable { template: String, reason: String },
    #[error("step {step} out of range for {len} subquestions")]
    StepOutOfRange { step: usize, len: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty generation")]
    EmptyAnswer,
    #[error("index {index} out of range for {len} positions")]
    InvalidIndex { index: usize, len: usize },
    #[error("no correct samples; failing templates: {}", templates.join(", "))]
    EmptyDataset { templates: Vec<String> },
    #[error("corrupt cache: {0}")]
    CorruptCache(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("insufficient data: no {side} activations")]
    InsufficientData { side: &'static str },
    #[error("requested {requested} heads but only {available} available")]
    CountTooLarge { requested: usize, available: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage, 2 data, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numeric(_) => 3,
            Error::Config(_) | Error::Precondition(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
