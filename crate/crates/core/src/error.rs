use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: need at least {needed} {what}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-parsable class name, stable across releases.
    pub fn class(&self) -> &'static str {
        match self {
            CoreError::Domain(_) => "domain",
            CoreError::InsufficientData { .. } => "insufficient-data",
            CoreError::Shape(_) => "shape",
            CoreError::State(_) => "state",
            CoreError::Validation(_) => "validation",
            CoreError::Config(_) => "config",
            CoreError::Dataset(_) => "dataset",
            CoreError::Format { .. } => "format",
            CoreError::Checksum { .. } => "checksum",
            CoreError::UndefinedMetric(_) => "undefined-metric",
            CoreError::Io { .. } => "io",
            CoreError::Wav { .. } => "wav",
            CoreError::Manifest { .. } => "manifest",
            CoreError::Divergence { .. } => "training-divergence",
        }
    }
}
