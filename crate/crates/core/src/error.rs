//! Error taxonomy shared across the crate.
//!
//! The CLI maps these onto process exit codes: config errors exit with 2,
//! numerical failures with 3, failed verification with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was requested on an operator kind that cannot support it.
    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),

    /// Invalid configuration, detected before any compute.
    #[error("config error: {0}")]
    Config(String),

    /// A discrete OT instance violates its invariants (weights, costs, dims).
    #[error("instance error: {0}")]
    Instance(String),

    /// The exact LP oracle failed; carries a dump of the offending instance.
    #[error("oracle error: {msg}\ninstance dump:\n{dump}")]
    Oracle { msg: String, dump: String },

    /// A capability the caller asked for is unavailable in this build/context.
    #[error("capability error: {0}")]
    Capability(String),

    /// Value outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite loss or state encountered; training aborted.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Verification run found violated certificates.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::UnsupportedOperator(_) => 2,
            Error::Numerical(_) | Error::Oracle { .. } => 3,
            Error::Verification(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
