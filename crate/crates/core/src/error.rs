use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("wav format error in {path}: {field} {detail}")]
    WavFormat {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("generator produced non-finite output")]
    CorruptGenerator,

    #[error("training diverged at {context}: {detail}")]
    Divergence { context: String, detail: String },

    #[error("label {label} outside class set of size {classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv/io error: {0}")]
    Write(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
