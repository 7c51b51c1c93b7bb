use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A mandatory column is absent from the header row.
    #[error("missing column `{column}` (field {field})")]
    MissingColumn { field: String, column: String },

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("duplicate unit_id `{0}`")]
    DuplicateUnit(String),

    #[error("unknown unit id `{id}` in pair ({a}, {b})")]
    UnknownUnit { id: String, a: String, b: String },

    #[error("self-pair on unit `{0}`")]
    SelfLoop(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("degenerate field: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
