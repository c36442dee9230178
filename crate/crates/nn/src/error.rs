use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },

    #[error("cannot differentiate through `{0}`: no backward rule")]
    Capability(String),

    #[error("non-finite gradient at parameter index {index}")]
    NonFinite { index: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("malformed parameter file at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        NnError::Shape { op, expected: expected.to_string(), got: got.to_string() }
    }
}
