use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Gateway,
    Data,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invariant { field: String, reason: String },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown query id {0:?}")]
    UnknownQuery(String),

    #[error("unknown context id {0:?}")]
    UnknownContext(String),

    #[error("capability unsupported: {0}; fall back to a metric-based utility")]
    CapabilityUnsupported(String),

    #[error("http {status} from {url}{}", retry_after.map(|s| format!(" (retry after {s}s)")).unwrap_or_default())]
    Http {
        url: String,
        status: u16,
        retry_after: Option<u64>,
        body: String,
    },

    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },

    #[error("malformed response from {url}: {message}")]
    BadResponse { url: String, message: String },

    #[error("no score for sample {sample:?} context {context:?}")]
    MissingScore { sample: String, context: String },

    #[error("intervention rejected: {0}")]
    Intervention(String),

    #[error("missing embedding for {0}")]
    MissingEmbedding(String),

    #[error("weights parse error: {0}")]
    WeightsParse(String),

    #[error("weights shape error: {0}")]
    WeightsShape(String),

    #[error("weights checksum mismatch: header {expected}, payload {actual}")]
    WeightsChecksum { expected: String, actual: String },

    #[error("missing loss component {0}")]
    MissingComponent(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON at {path}:{line}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Http { .. }
            | Error::Transport { .. }
            | Error::BadResponse { .. }
            | Error::CapabilityUnsupported(_) => ErrorClass::Gateway,
            Error::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}
