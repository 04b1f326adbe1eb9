use thiserror::Error;

pub type Result<T> = std::result::Result<T, RaaError>;

#[derive(Debug, Error)]
pub enum RaaError {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Stateful misuse: stale caches, uninitialized running statistics, checkpoint mismatch.
    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("non-finite value at coordinate {coord}")]
    NonFinite { coord: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RaaError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        RaaError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        RaaError::Dimension {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }
    }
}
