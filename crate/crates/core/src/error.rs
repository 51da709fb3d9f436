use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid complexity {m}: window of {} values does not fit in {slots} slots", m + 1)]
    InvalidComplexity { m: usize, slots: usize },
    #[error("pointer {pointer} out of range for {slots} value slots")]
    InvalidPointer { pointer: u8, slots: usize },
    #[error("empty aggregation window")]
    InvalidWindow,
    #[error("digit {value} out of range for vocabulary size {vocab}")]
    InvalidDigit { value: u8, vocab: u8 },
    #[error("unsupported vocabulary size {0} (expected 2..=10)")]
    InvalidVocab(u32),
    #[error("unsupported aggregation id {0}")]
    UnsupportedAggregation(u32),
    #[error("unknown aggregation name `{0}`")]
    UnknownAggregation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of capacity: cannot allocate {0} records")]
    OutOfCapacity(usize),

    #[error("bad magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("record {index} violates dataset invariants: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("holdout index {i} out of range 1..={max}")]
    HoldoutOutOfRange { i: usize, max: usize },
    #[error("holdout infeasible: acceptance probability {0:e} below 1e-6")]
    InfeasibleHoldout(f64),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("bit vector length {found} does not match codec length {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite activations at layer {layer}")]
    NumericFailure { layer: usize },

    #[error("label {label} out of range for IDX image bank")]
    InvalidLabel { label: u8 },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("image shape {rows}x{cols} is not 28x28")]
    InvalidShape { rows: usize, cols: usize },
    #[error("class {0} has no images in the bank")]
    EmptyClassPool(u8),
    #[error("empty allowed digit set for cell {0}")]
    EmptyAllowedSet(usize),

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
