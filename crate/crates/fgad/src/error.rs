//! Crate-wide error type.

use crate::mfsc::ValidationReport;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid {context}: {message}")]
    Invalid {
        context: &'static str,
        message: String,
    },

    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("document failed validation:\n{0}")]
    DocumentInvalid(ValidationReport),

    #[error("endpoint error after {attempts} attempt(s): {message}")]
    Endpoint { attempts: usize, message: String },

    #[error("response failed schema validation after {attempts} attempt(s):\n{report}")]
    SchemaRetriesExhausted {
        attempts: usize,
        report: ValidationReport,
    },

    #[error("missing caption fixture for category `{0}`")]
    MissingFixture(String),

    #[error("file format error in `{field}`: {message}")]
    Format {
        field: &'static str,
        message: String,
    },

    #[error("degenerate foreground: stage-1 clustering assigned no token to the foreground")]
    DegenerateForeground,

    #[error("non-finite loss in term `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
