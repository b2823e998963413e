use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("environment index {index} out of range ({available} available)")]
    UnknownEnvironment { index: usize, available: usize },
    #[error("domain index {index} out of range for {n_domains} domains")]
    DomainOutOfRange { index: usize, n_domains: usize },
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),
    #[error("invariance term undefined with one domain (method {method} needs at least 2 training environments, got {got})")]
    TooFewEnvironments { method: String, got: usize },
    #[error("instance is not linearly separable: {0}")]
    NotSeparable(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
