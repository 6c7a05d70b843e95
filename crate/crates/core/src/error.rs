use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tensor / autodiff
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("log of nonpositive value {0}")]
    NonPositiveLog(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("trace already consumed by a previous backward pass")]
    TraceConsumed,
    #[error("variable belongs to a different trace")]
    DetachedTrace,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    // datasets
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("epoch exhausted")]
    EpochExhausted,

    // model
    #[error("input width {found} does not match architecture width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("unknown latent tap `{0}`")]
    UnknownTap(String),
    #[error("invalid architecture descriptor `{0}`")]
    BadArchitecture(String),

    // checkpoints
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} not supported (reader expects {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    // training / estimation
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("MINE estimate {value} exceeds ln(batch) bound {bound}; estimator unstable")]
    MineUnstable { value: f64, bound: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
