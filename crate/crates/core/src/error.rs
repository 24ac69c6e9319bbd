use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("gradient requested of a non-scalar node (output has {len} elements)")]
    NotScalar { len: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("layer `{0}` does not produce an HxWxK feature map")]
    NotExplainable(String),

    #[error("class index {index} out of range for a {classes}-class model")]
    UnknownClass { index: usize, classes: usize },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (loss is not finite); try a lower learning rate than {lr}")]
    Divergence { epoch: usize, lr: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("tag of side {side}px cannot fit in a {width}x{height} image")]
    TagDoesNotFit { side: usize, width: usize, height: usize },

    #[error("calibration failed at layer `{layer}`: upper bound {upper} <= lower bound {lower}; concept is not separable here")]
    Calibration { layer: String, upper: f64, lower: f64 },

    #[error("layer mismatch: {0}")]
    LayerMismatch(String),

    #[error("binary mode expects a single-logit head, got {0} class attributions")]
    BinaryMode(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
