use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("object placement failed after {attempts} rejection-sampling attempts")]
    PlacementFailed { attempts: usize },

    #[error("infeasible task chain: {0}")]
    InfeasibleChain(String),

    #[error("object {id} projects to zero pixels in the {view} view")]
    ObjectOccluded { id: u32, view: &'static str },

    #[error("degenerate gaze box with area {area} px")]
    DegenerateBox { area: u32 },

    #[error("checksum mismatch in {path}: {detail}")]
    ChecksumMismatch { path: PathBuf, detail: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersionUnsupported { found: u32, expected: u32 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("action component {value} outside [-1, 1]")]
    OutOfRange { value: f64 },

    #[error("degenerate covariance: patch variance is zero")]
    DegenerateCovariance,

    #[error("scene tokenizer has not been fitted")]
    NotFitted,

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("attention weights were not retained for this forward pass")]
    AttentionNotRetained,

    #[error("invalid schedule range: {0}")]
    InvalidRange(String),

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: u64 },

    #[error("digest mismatch in {path}: {detail}")]
    DigestMismatch { path: PathBuf, detail: String },

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("PNG error: {0}")]
    Png(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numeric kind (non-finite values, failed gradient checks).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteActivation(_) | Error::NonFiniteLoss { .. }
        )
    }
}
