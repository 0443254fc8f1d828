use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimensions too small: nlat={nlat} (need >= 2), nlon={nlon} (need >= 4)")]
    GridTooSmall { nlat: usize, nlon: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("lmax {lmax} is not resolvable on a grid with {nlat} latitude rows")]
    UnresolvableLmax { lmax: usize, nlat: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unstable dynamics: non-finite state at time index {step}")]
    UnstableDynamics { step: usize },

    #[error("degenerate field: zero standard deviation for {0}")]
    DegenerateField(String),

    #[error("space mismatch: expected {expected}, found {found}")]
    SpaceMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("timestamp out of range: {0}")]
    OutOfRange(String),

    #[error("index out of range: {index} (valid range 0..{len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("split points {points:?} do not sum to {n_steps}")]
    SplitMismatch { points: Vec<usize>, n_steps: usize },

    #[error("zero reference: {0}")]
    ZeroReference(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("every learning-rate probe diverged")]
    AllProbesDiverged,

    #[error("archives are not aligned: {0}")]
    Alignment(String),

    #[error("missing climatology bucket: {0}")]
    MissingBucket(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss in stage {stage} at batch {batch}")]
    NonFiniteLoss {
        stage: String,
        batch: usize,
        last_good: Box<crate::emulator::Checkpoint>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by invalid inputs rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidParameter(_)
                | Error::SplitMismatch { .. }
                | Error::GridTooSmall { .. }
                | Error::UnresolvableLmax { .. }
                | Error::Format { .. }
                | Error::VersionMismatch { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
