//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An index or timestamp fell outside its valid range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Array shapes disagreed between two pipeline stages.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dataset or checkpoint file failed structural validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A line of an input file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A checkpoint is incompatible with the task it was asked to serve.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// A numeric failure (NaN or divergence) occurred mid-computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::OutOfRange(_)
            | Error::Shape(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Incompatible(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(Error::InvalidArgument("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("nan".into()).exit_code(), 3);
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(io.exit_code(), 4);
    }
}
