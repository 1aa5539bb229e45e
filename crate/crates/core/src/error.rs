//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("io error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset record is missing a field or is malformed.
    #[error("schema error in record {record}: {message}")]
    Schema { record: String, message: String },

    /// A value violates a domain invariant (target not in options, duplicate id, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing slot {slot}")]
    Render { slot: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Context plus target does not fit the model's context window.
    #[error("window overflow: context {context} + target {target} tokens exceeds limit {limit}")]
    Window {
        context: usize,
        target: usize,
        limit: usize,
    },

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected}); migrate the file explicitly")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
