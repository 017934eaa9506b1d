use thiserror::Error;

/// Recoverable failures surfaced to callers. Contract violations (bad shapes,
/// out-of-range indices) are programming errors and panic via assertions
/// instead.
#[derive(Debug, Error)]
pub enum Error {
    /// A numerical routine could not proceed (singular factorization,
    /// non-finite intermediate, iteration cap without progress).
    #[error("numerical failure in {context}: {message}")]
    Numerical { context: String, message: String },

    /// Model fitting failed; the caller is expected to keep its previous
    /// model and retry later.
    #[error("model fit failed during {context}: {message}")]
    Fit { context: String, message: String },

    /// A linear program was malformed or exceeded its pivot budget.
    #[error("linear program failed: {0}")]
    LinearProgram(String),

    /// Configuration rejected by validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Filesystem I/O while writing or reading artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Artifact or snapshot content that does not parse.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    /// Snapshot content that parses but violates its own shape declarations.
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

impl Error {
    pub fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn fit(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Fit {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
