use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// A geometric operation received an input outside its domain, e.g. a zero-norm vector.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid. `field` is a dotted path into the config.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// Several configuration problems found at once.
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    ConfigList(Vec<Error>),

    /// Too few distinct tokens to form the requested clusters.
    #[error("degenerate input: only {distinct} distinct tokens for {clusters} clusters")]
    Degenerate { distinct: usize, clusters: usize },

    /// Shape or structural mismatch between arrays.
    #[error("structural error: {0}")]
    Shape(String),

    /// The exhaustive oracle refuses instances above its size guard.
    #[error("size guard: {size} exceeds the oracle limit of {limit}")]
    SizeGuard { size: usize, limit: usize },

    /// An internal invariant did not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {context}: {message}")]
    Format { context: String, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
