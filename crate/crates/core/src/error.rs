use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value entering {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter mode `{0}` (expected norm, adapter, all or head)")]
    UnknownMode(String),

    #[error("checkpoint schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("class {0} is already present in the prototype bank")]
    ClassCollision(usize),

    #[error("prototype bank is empty")]
    EmptyBank,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("accuracy list is empty")]
    EmptyMetrics,

    #[error("accuracy {0} outside [0, 1]")]
    AccuracyRange(f64),

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("corruption severity {0} outside 1..=5")]
    Severity(u8),

    #[error("task stream: {0}")]
    Stream(String),

    #[error("idx: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("idx: truncated payload, expected {expected} bytes but found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("idx: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
