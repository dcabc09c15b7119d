use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("numeric column `{column}` is constant on the training split")]
    ConstantColumn { column: String },

    #[error("unseen category `{value}` in column `{column}`")]
    UnseenCategory { column: String, value: String },

    #[error("invalid value for column `{column}`: {message}")]
    InvalidValue { column: String, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite value in flow layer {layer}")]
    FlowNonFinite { layer: usize },

    #[error("training diverged in {phase} at step {step}: {reason}")]
    Divergence {
        phase: String,
        step: u64,
        reason: String,
    },

    #[error("bundle format version {found} is not supported (expected {expected})")]
    BundleVersion { found: u32, expected: u32 },

    #[error("bundle hash mismatch: header says {expected}, content hashes to {actual}")]
    BundleHash { expected: String, actual: String },

    #[error("malformed bundle: {0}")]
    Bundle(String),

    #[error("metric undefined: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
