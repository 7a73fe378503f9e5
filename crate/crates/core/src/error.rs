use std::path::PathBuf;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("path not found: {}", .0.display())]
    PathNotFound(PathBuf),

    #[error("no samples found in {}", .0.display())]
    NoSamples(PathBuf),

    #[error("no samples")]
    EmptyDataset,

    #[error("sample {id}: missing {what}")]
    MissingPair { id: String, what: &'static str },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("input {height}x{width} is not divisible by {multiple}; pad to {padded_height}x{padded_width}")]
    NotDivisible {
        height: usize,
        width: usize,
        multiple: usize,
        padded_height: usize,
        padded_width: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint parse error: {0}")]
    CheckpointParse(String),

    #[error("missing error map for sample {0}")]
    MissingErrorMap(String),

    #[error("checkpoint has no error-attention weights")]
    MissingAttentionWeights,

    #[error("non-finite loss at stage {stage} epoch {epoch} step {step}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        step: usize,
        last_good: Box<crate::trainer::Checkpoint>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error for {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
