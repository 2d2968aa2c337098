use std::path::PathBuf;

/// Errors produced by the tracking engine and its file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {what}: {why}")]
    InvalidValue { what: &'static str, why: String },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    EmbeddingDim { expected: usize, got: usize },

    #[error("feature map geometry mismatch: expected {expected}, got {got}")]
    GeometryMismatch { expected: String, got: String },

    #[error("cost matrix shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular innovation covariance in Kalman update")]
    SingularInnovation,

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("missing configuration key `{0}`")]
    MissingKey(String),

    #[error("bad value for key `{key}`: {why}")]
    BadKey { key: String, why: String },

    #[error("{path}:{line}: {why}")]
    Parse {
        path: PathBuf,
        line: usize,
        why: String,
    },

    #[error("detection/embedding count mismatch ({detections} detections, {embeddings} embeddings)")]
    CountMismatch {
        detections: usize,
        embeddings: usize,
    },

    #[error("ground truth is empty (MOTA undefined)")]
    EmptyGroundTruth,

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::InvalidValue {
            what,
            why: why.into(),
        }
    }

    pub fn at_frame(self, frame: u64) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
