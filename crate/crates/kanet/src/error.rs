use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum KanetError {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A class was given no samples where at least one is required.
    #[error("class {0} has no samples")]
    EmptyClass(u32),

    /// Attempt to register a class id that already exists.
    #[error("class {0} already present")]
    DuplicateClass(u32),

    /// Bad run or split configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary tensor payload.
    #[error("tensor format error: {0}")]
    Format(String),

    /// Malformed manifest line.
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    /// Session applied out of order or other protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KanetError>;

impl KanetError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        KanetError::Shape { op, detail: detail.into() }
    }
}
