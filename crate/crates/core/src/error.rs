use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced a NaN or infinite value.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Misuse of the differentiation tape (non-scalar root, repeated backward, ...).
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// Degenerate or invalid geometric quantity.
    #[error("geometry: {0}")]
    Geometry(String),

    /// Invalid configuration.
    #[error("config: {0}")]
    Config(String),

    /// Malformed or missing input data.
    #[error("data: {0}")]
    Data(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::Io(_) => ErrorClass::Data,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::Autodiff(_)
            | Error::Geometry(_)
            | Error::Diverged { .. } => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
