use thiserror::Error;

/// Errors surfaced by the library. Variants map to the failure modes of the
/// individual subsystems (parsing, configuration, attack preconditions, ...).
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("feature index {index} out of range for dimension {dim}")]
    IndexRange { index: u32, dim: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stratified split impossible: {0}")]
    Stratification(String),

    #[error("attack precondition violated: {0}")]
    Precondition(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("model layout error: {0}")]
    Layout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
