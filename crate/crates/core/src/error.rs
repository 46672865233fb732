use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    #[error("empty support set")]
    EmptySupport,

    #[error("no local features")]
    NoLocalFeatures,

    #[error("target index {index} out of range for {classes} classes")]
    InvalidTarget { index: usize, classes: usize },

    #[error("invalid support set: {0}")]
    InvalidSupport(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected \"ATNA\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported archive version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated archive: {0}")]
    Truncated(String),

    #[error("archive shape error: {0}")]
    Shape(String),

    #[error("archive header: {0}")]
    Header(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("class {class} has {available} samples, need more than {shots}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        shots: usize,
    },

    #[error("per-class zero-shot accuracies are missing")]
    MissingAccuracies,

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}
