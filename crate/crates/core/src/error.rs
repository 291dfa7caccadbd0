use std::io;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid probability mass function: {0}")]
    InvalidPmf(String),

    #[error("degenerate vector: norm {norm:e} is below the normalization threshold")]
    DegenerateVector { norm: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("label {label} out of range for {classes} identities")]
    InvalidLabel { label: usize, classes: usize },

    #[error("evaluation protocol violated: {0}")]
    Protocol(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("non-finite values in `{group}`")]
    NonFinite { group: String },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("cache does not match the parameters or lookup table passed to backward")]
    StaleCache,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short, stable identifier for machine consumption (CLI error lines).
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::InvalidPmf(_) => "invalid_pmf",
            Error::DegenerateVector { .. } => "degenerate_vector",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::Protocol(_) => "protocol",
            Error::Config { .. } => "config",
            Error::Format(_) => "format",
            Error::Checksum { .. } => "checksum",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::StaleCache => "stale_cache",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
