use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("sequence too short for {what}: need at least {min}, got {got}")]
    TooShort { what: &'static str, min: usize, got: usize },

    #[error("no backward rule registered for primitive `{0}`")]
    UnregisteredPrimitive(String),

    #[error("inverse transform left an imaginary residue of {residue:e} (limit {limit:e})")]
    BrokenSymmetry { residue: f64, limit: f64 },

    #[error("non-finite loss in term {term}")]
    NonFiniteLoss { term: &'static str },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("train/test split overlap for writers: {0:?}")]
    SplitOverlap(Vec<String>),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("synthetic generator: {0}")]
    Generator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
