use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    // epoch files
    #[error("bad magic in epoch file (expected \"EPB1\")")]
    MagicMismatch,
    #[error("unsupported epoch file version {0}")]
    VersionUnsupported(u16),
    #[error("record {record}: expected {expected} channels, found {found}")]
    ChannelCountMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: expected {expected} samples per channel, found {found}")]
    SampleCountMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: non-finite sample at channel {channel}, index {index}")]
    NonFiniteSample {
        record: usize,
        channel: usize,
        index: usize,
    },
    #[error("record {record}: {reason}")]
    MalformedRecord { record: usize, reason: String },
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("invalid modality layout: {0}")]
    InvalidLayout(String),
    #[error("class {class} has {count} samples, need at least {min}")]
    ClassTooSmall {
        class: String,
        count: usize,
        min: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // dsp
    #[error("invalid band: {0}")]
    InvalidBand(String),
    #[error("unsupported resampling ratio {fs_in} Hz -> {fs_out} Hz")]
    UnsupportedRatio { fs_in: f64, fs_out: f64 },
    #[error("segment length {segment} exceeds signal length {signal}")]
    SegmentTooLong { segment: usize, signal: usize },

    // features
    #[error("signal too short: need at least {min} samples, got {len}")]
    TooShort { min: usize, len: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("normalisation statistics cover {stats} features, matrix has {matrix}")]
    StatsDimensionMismatch { stats: usize, matrix: usize },

    // models
    #[error("all labels identical; nothing to learn")]
    DegenerateData,
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),
    #[error("schema version mismatch: expected {expected}, found {found:?}")]
    SchemaVersionMismatch { expected: u32, found: Option<u64> },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("ensemble members disagree: {0}")]
    RegistryMismatch(String),

    // search / evaluation
    #[error("search space is empty")]
    EmptySpace,
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("modality mask selects no features: {0}")]
    EmptyMask(String),
}
