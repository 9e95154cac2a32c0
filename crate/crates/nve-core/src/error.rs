use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum NveError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("unknown layer index {layer} (model has {num_layers} layers)")]
    UnknownLayer { layer: usize, num_layers: usize },

    #[error("unknown weight slot `{0}`")]
    UnknownSlot(String),

    #[error("token id {token} out of range (vocab_size {vocab_size})")]
    TokenOutOfRange { token: u32, vocab_size: u32 },

    #[error("tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("missing weight slot `{slot}` for layer {layer}")]
    MissingSlot { slot: String, layer: usize },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("non-finite activation at layer {layer}, prompt {prompt}")]
    NonFiniteActivation { layer: usize, prompt: usize },

    #[error("non-finite input to quantizer")]
    NonFiniteInput,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported format version {0}")]
    UnsupportedFormatVersion(u32),

    #[error("malformed artifact: {0}")]
    MalformedArtifact(String),

    #[error("bad magic: expected {expected}, got {got}")]
    BadMagic { expected: String, got: String },

    #[error("unknown paging unit {0}")]
    UnknownUnit(usize),

    #[error("plan/model mismatch: {0}")]
    PlanMismatch(String),

    #[error("architecture key mismatch: profile has {profile_key}, model has {model_key}")]
    ArchitectureKeyMismatch {
        profile_key: String,
        model_key: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NveError>;
