use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("raw class {0} is outside the label table")]
    UnknownClass(u8),
    #[error("mask is not one-hot encodable: {0}")]
    BadMask(String),
    #[error("no samples available in split {0}")]
    EmptySplit(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in loss term {0}")]
    NonFiniteTerm(&'static str),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("evaluation scope is empty")]
    EmptyScope,
    #[error("reference mode requires a reference image")]
    MissingReference,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter {0}")]
    Param(String),
    #[error("sample source: {0}")]
    Source(String),
}
