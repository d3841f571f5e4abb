use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate quantization range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },

    #[error("unsupported quantization bit width {0} (expected 8 or 16)")]
    UnsupportedBits(u32),

    #[error("activation ranges are frozen after the precision switch")]
    ObserveAfterFreeze,

    #[error("training batch is empty")]
    EmptyBatch,

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("environment `{0}` only registers dimensions and cannot be simulated")]
    ShapeOnlyEnv(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
