use thiserror::Error;

/// Errors surfaced by occukit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A grid specification violated one of its invariants.
    #[error("bad grid spec: {0}")]
    BadGridSpec(String),

    /// Tensor/plane/volume dimensions did not agree.
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    /// A plane's channel count is not divisible by the requested height.
    #[error("bad C2H shape: {channels} channels not divisible by Z={z}")]
    BadC2hShape { channels: usize, z: usize },

    /// A loss was evaluated with no voxels contributing to it.
    #[error("empty loss support")]
    EmptyLossSupport,

    /// A named weight tensor is missing or malformed.
    #[error("bad weights: {0}")]
    BadWeights(String),

    /// Counts of paired inputs (frames vs poses, volumes vs poses) disagree.
    #[error("count mismatch: {0}")]
    CountMismatch(String),

    /// A binary file had the wrong magic, version, or structure.
    #[error("bad {format} header in {path}: {detail}")]
    BadHeader {
        format: &'static str,
        path: String,
        detail: String,
    },

    /// Invalid field value in an input file or config.
    #[error("invalid {what}: {detail}")]
    InvalidInput { what: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn invalid(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            what: what.into(),
            detail: detail.into(),
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
