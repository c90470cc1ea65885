use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every value fell on the same point, so equal-width bins cannot be formed.
    #[error("degenerate range: all values equal {value}")]
    DegenerateRange { value: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no usable records in input")]
    EmptyInput,

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data validation, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 1,
            Error::InvalidInput(_)
            | Error::DegenerateRange { .. }
            | Error::InsufficientData(_)
            | Error::EmptyInput
            | Error::Parse { .. } => 2,
            Error::Numerical { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
