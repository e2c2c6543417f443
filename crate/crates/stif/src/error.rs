//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the library.
///
/// The CLI maps these onto exit codes: config errors → 2, data/IO errors → 3,
/// numerical divergence → 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not conform for a primitive.
    #[error("{primitive}: shape mismatch: {detail}")]
    Shape { primitive: &'static str, detail: String },

    /// An API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input value lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or file contents failed validation.
    #[error("data error: {0}")]
    Data(String),

    /// A training-time numerical failure, attributed to the loss that diverged.
    #[error("training diverged: {component} is not finite at iteration {iteration}")]
    NonFinite { component: String, iteration: u64 },

    /// File format version or architecture mismatch.
    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
