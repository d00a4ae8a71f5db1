use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped into coarse categories (see [`ScopeError::category`])
/// so the CLI can emit a machine-parsable error class and exit code.
#[derive(Debug, Error)]
pub enum ScopeError {
    #[error("zero vector: norm {norm:e} is below 1e-12")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown class {class}")]
    UnknownClass { class: u32 },

    #[error("vocabulary has {size} classes; boundary proximity needs at least 2")]
    VocabularyTooSmall { size: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: u64,
        #[source]
        source: Box<ScopeError>,
    },

    #[error("sample {sample_id} has no score")]
    MissingScore { sample_id: u64 },

    #[error("federation has no samples")]
    EmptyFederation,

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("cannot place {classes} prototypes {separation_deg} degrees apart in dimension {dim}")]
    InfeasibleSeparation {
        classes: usize,
        dim: usize,
        separation_deg: f64,
    },

    #[error("no client holds any training sample")]
    EmptyCoreset,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("record {index}: duplicate sample id {sample_id}")]
    DuplicateId { index: usize, sample_id: u64 },

    #[error("record {index}: label {label} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: u32,
    },

    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<ScopeError>,
    },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScopeError>;

impl ScopeError {
    /// Coarse error class: `config`, `data` or `io`.
    pub fn category(&self) -> &'static str {
        match self {
            ScopeError::Config(_) => "config",
            ScopeError::Io(_) => "io",
            _ => "data",
        }
    }

    pub(crate) fn for_sample(sample_id: u64, source: ScopeError) -> Self {
        ScopeError::Sample {
            sample_id,
            source: Box::new(source),
        }
    }

    pub(crate) fn for_record(index: usize, source: ScopeError) -> Self {
        ScopeError::Record {
            index,
            source: Box::new(source),
        }
    }
}

impl From<csv::Error> for ScopeError {
    fn from(e: csv::Error) -> Self {
        ScopeError::Malformed(e.to_string())
    }
}

impl From<serde_json::Error> for ScopeError {
    fn from(e: serde_json::Error) -> Self {
        ScopeError::Malformed(e.to_string())
    }
}
