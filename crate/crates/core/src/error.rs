//! Error type shared by all engine modules.

/// Errors produced by the engine, grouped by the failure class they report.
///
/// The CLI maps these onto process exit codes, so every fallible operation
/// in the library picks the variant matching what actually went wrong
/// rather than a generic catch-all.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix/tensor dimensions do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid run configuration (bad hyperparameter, malformed key, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or malformed input data (labels out of range, parse failures, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (non-convergence, non-finite values, non-PSD input).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller violated an internal contract (e.g. mismatched eigenvalue multisets).
    #[error("logic error: {0}")]
    Logic(String),

    /// A property/verification suite did not hold.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
