use std::path::PathBuf;
use thiserror::Error;

/// Failures of the harness layer. File-format problems each get their own
/// variant so diagnostics stay distinguishable.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {len} bytes is too short for an IDX header")]
    IdxHeaderTruncated { path: PathBuf, len: usize },
    #[error("{path}: bad IDX magic 0x{observed:08x}, expected 0x{expected:08x}")]
    IdxBadMagic {
        path: PathBuf,
        observed: u32,
        expected: u32,
    },
    #[error("{path}: IDX element type 0x{observed:02x} is not unsigned byte (magic 0x{magic:08x})")]
    IdxBadType { path: PathBuf, observed: u8, magic: u32 },
    #[error("{path}: IDX header declares {found} dimensions, expected {expected} (magic 0x{magic:08x})")]
    IdxBadRank {
        path: PathBuf,
        found: u8,
        expected: u8,
        magic: u32,
    },
    #[error("{path}: IDX dimension {index} is zero")]
    IdxZeroDim { path: PathBuf, index: usize },
    #[error("{path}: IDX payload truncated, header promises {expected} bytes but {found} follow")]
    IdxPayloadTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} unexpected trailing bytes after the IDX payload")]
    IdxTrailing { path: PathBuf, extra: usize },
    #[error("{images}: {image_count} images but {labels}: {label_count} labels")]
    CountMismatch {
        images: PathBuf,
        image_count: usize,
        labels: PathBuf,
        label_count: usize,
    },
    #[error("{path}: label {label} of record {index} is outside [0, {classes})")]
    LabelOutOfRange {
        path: PathBuf,
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("{path}: CIFAR file is empty")]
    CifarEmpty { path: PathBuf },
    #[error("{path}: CIFAR length {len} is not a whole number of 3073-byte records ({rem} bytes left over)")]
    CifarTruncated { path: PathBuf, len: usize, rem: usize },
    #[error("train images are {train:?} but test images are {test:?}")]
    SplitShapeMismatch { train: [usize; 3], test: [usize; 3] },
    #[error("{path}: not a checkpoint (magic {observed:?})")]
    CheckpointMagic { path: PathBuf, observed: Vec<u8> },
    #[error("{path}: checkpoint format version {found}, this build reads version {supported}")]
    CheckpointVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("{path}: checkpoint truncated while reading {what}")]
    CheckpointTruncated { path: PathBuf, what: &'static str },
    #[error("{path}: checkpoint is malformed: {reason}")]
    CheckpointMalformed { path: PathBuf, reason: String },
    #[error("{path}: checkpoint config hash {found} does not match expected {expected}")]
    CheckpointHash {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ibrar_core::Error),
    #[error("{0}")]
    Report(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems exit with status 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(ibrar_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
