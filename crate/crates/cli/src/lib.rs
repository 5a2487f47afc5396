//! Command-line front end: configuration, dataset ingestion, artifact
//! emission, and the `run`/`verify`/`spectra` commands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod dataset;

use nscl_core::error::Error;

/// Process exit code per error class: 1 config, 2 data, 3 numeric, 4
/// verification failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Shape(_) | Error::Numeric(_) | Error::Logic(_) => 3,
        Error::Verification(_) => 4,
    }
}

/// Stable one-word class name for the machine-readable error line.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Io(_) => "io",
        Error::Shape(_) => "shape",
        Error::Numeric(_) => "numeric",
        Error::Logic(_) => "logic",
        Error::Verification(_) => "verification",
    }
}
