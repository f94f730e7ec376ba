use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("weight count mismatch: {0}")]
    WeightCountMismatch(String),

    #[error("non-finite weight in {0}")]
    NonFiniteWeight(String),

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("target {0} out of range")]
    TargetOutOfRange(String),

    #[error("layer {index} out of range (valid: 0..={max})")]
    LayerOutOfRange { index: usize, max: usize },

    #[error("mask too large: {0}")]
    MaskTooLarge(String),

    #[error("completeness is not defined for {0} maps")]
    MethodMismatch(String),

    #[error("segment position {0} out of range")]
    PositionOutOfRange(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("spectrogram height must be 48, got {0}")]
    HeightNot48(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
