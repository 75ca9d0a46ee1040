use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value outside the accepted domain (bad probability vector, rank too
    /// large, empty grid, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was called in the wrong state, e.g. backward before forward.
    #[error("invalid state: {0}")]
    State(String),

    /// Distributed-simulation protocol violation.
    #[error("protocol failure at step {step}: {detail}")]
    Protocol { step: usize, detail: String },

    /// Measured operation counts disagree with the analytic cost table.
    #[error("flop reconciliation failed: {0}")]
    Reconciliation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {0}")]
    NonFinite(usize),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
