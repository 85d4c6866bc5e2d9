use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure modes of each
/// subsystem so callers can match on them without string parsing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("element mask selects no elements")]
    EmptyMask,

    #[error("invalid schedule: warmup {warmup_epochs} epochs must be < total {total_epochs}")]
    InvalidSchedule {
        warmup_epochs: usize,
        total_epochs: usize,
    },

    #[error("masking ratio {0} outside (0, 1)")]
    InvalidRatio(f64),

    #[error("cannot draw {requested} distinct masks: only {available} exist")]
    InfeasibleSet { requested: usize, available: u128 },

    #[error("anomaly ratio {0} outside [0, 1]")]
    InvalidAnomalyRatio(f64),

    #[error("segmentation produced no region above 1% of image area")]
    SegmentationEmpty,

    #[error("segmented region admits no valid patch placement")]
    RegionTooSmall,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(
        "no image was confidently predicted abnormal; the abnormal module cannot \
         be trained (rerun with more unlabeled data, a higher anomaly ratio, or \
         fall back to the frozen-feature classifier scores)"
    )]
    InsufficientPseudoAbnormal,

    #[error("metric needs at least one positive and one negative label")]
    DegenerateLabels,

    #[error("all scores identical; histogram range is degenerate")]
    DegenerateRange,

    #[error("samples have zero pooled variance; t statistic undefined")]
    DegenerateVariance,

    #[error("each sample needs at least 2 observations, got {0} and {1}")]
    SampleTooSmall(usize, usize),

    #[error("hidden-label sidecar not found: {0}")]
    MissingSidecar(PathBuf),

    #[error("selection is empty")]
    EmptySelection,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: manifest parse error: {detail}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}: not a PGM (P5) file: {detail}")]
    PgmParse { path: PathBuf, detail: String },

    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: checkpoint version {found}, this build reads version {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error(
        "{path}: checkpoint config fingerprint {found:#018x} does not match the \
         current config {expected:#018x} (pass --force to load anyway)"
    )]
    ConfigMismatch {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("{path}: truncated or corrupt checkpoint: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("{path}:{line}: config parse error: {detail}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
