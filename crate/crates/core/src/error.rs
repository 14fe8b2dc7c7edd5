use thiserror::Error;

pub type Result<T> = std::result::Result<T, GgiuError>;

#[derive(Debug, Error)]
pub enum GgiuError {
    // Format errors.
    #[error("bad magic: expected \"GGFS\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported GGFS version {0} (this build reads version 1)")]
    UnsupportedVersion(u32),
    #[error("truncated payload at byte offset {offset}: needed {needed} more byte(s) for {what}")]
    Truncated {
        offset: u64,
        needed: u64,
        what: &'static str,
    },
    #[error("{count} trailing byte(s) after the last record at byte offset {offset}")]
    TrailingBytes { offset: u64, count: u64 },
    #[error("record {record_id}: class_index {class_index} out of range for {classes} class(es)")]
    ClassIndexOutOfRange {
        record_id: u64,
        class_index: u32,
        classes: usize,
    },
    #[error("record {record_id}: non-finite value in {field}")]
    NonFinite { record_id: u64, field: String },
    #[error("record {record_id}: value {value} in {field} is not exactly representable as float32")]
    NotRepresentable {
        record_id: u64,
        field: String,
        value: f64,
    },
    #[error("duplicate record_id {0}")]
    DuplicateRecordId(u64),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("{what} too long for the format ({len} > {max})")]
    FieldTooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("jsonl line {line}: {message}")]
    JsonLine { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),

    // Argument errors.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("patch request out of bounds: requested {requested}, record has {available}")]
    PatchBounds { requested: usize, available: usize },
    #[error("lambda entry {index} = {value} outside [0, 1]")]
    InvalidLambda { index: usize, value: f64 },
    #[error("covariance entry {index} = {value} is negative or non-finite")]
    InvalidCovariance { index: usize, value: f64 },
    #[error("degenerate observers at dimension {index}: both variances are zero")]
    DegenerateObserver { index: usize },
    #[error("cosine distance undefined for a zero vector")]
    ZeroVector,
    #[error("prototype class mismatch: {left} vs {right}")]
    ClassMismatch { left: u32, right: u32 },
    #[error("insufficient capacity: {0}")]
    Capacity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl GgiuError {
    /// True for errors caused by the caller's parameters rather than the data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            GgiuError::Config(_)
                | GgiuError::InvalidLambda { .. }
                | GgiuError::InvalidCovariance { .. }
                | GgiuError::DegenerateObserver { .. }
        )
    }
}
