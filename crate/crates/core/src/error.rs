use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or geometry did not line up; `dim` names the offending extent.
    #[error("shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        dim: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("array file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn shape(dim: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            dim: dim.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error was caused by what the caller supplied rather than
    /// by a failure inside the engine.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Internal(_) | Error::Json(_))
    }
}
