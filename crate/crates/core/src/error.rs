use thiserror::Error;

/// Errors raised by the flow engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("matrix is singular (pivot magnitude {pivot:e})")]
    Singular { pivot: f64 },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value {value} is outside the domain of {what}")]
    OutOfDomain { what: &'static str, value: f64 },
    #[error("latent point is outside the support of the uniform base")]
    OutOfSupport,
    #[error("layer parameters are not invertible: {0}")]
    NonInvertibleParams(String),
    #[error("no root of the bin quadratic in [0, 1] (knot set corrupted)")]
    NoRootInBin,
    #[error("beta must lie in (0, 1], got {0}")]
    BadBeta(f64),
    #[error("split {split} out of range for a level with {channels} channels")]
    BadSplit { split: usize, channels: usize },
    #[error("matrix is not orthogonal (||U^T U - I||_F = {0:e})")]
    NotOrthogonal(f64),
    #[error("all eigenvalues fell below the floor; data is degenerate")]
    DegenerateData,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("value {value} out of range for {bits}-bit data")]
    ValueOutOfRange { value: u32, bits: u32 },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FlowError {
    fn from(e: std::io::Error) -> Self {
        FlowError::Io(e.to_string())
    }
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;
