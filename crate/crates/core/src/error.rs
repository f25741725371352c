use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("indeterminate form: {0}")]
    IndeterminateForm(&'static str),
    #[error("non-finite or out-of-range complex component: {0}")]
    InvalidComplex(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid Mobius transformation: |det| = {0:e} is not above the invertibility threshold")]
    InvalidMobius(f64),
    #[error("identity map: every point is fixed")]
    IdentityMap,
    #[error("parabolic map: eigenvalues coincide, characteristic constant undefined")]
    ParabolicMap,
    #[error("unknown op: {0}")]
    UnknownOp(String),
    #[error("loss must be scalar-shaped, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("checkpoint version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("Mobius parameter {name} dimension {dim} lost invertibility (|det| = {det:e})")]
    InvertibilityViolation { name: String, dim: usize, det: f64 },
    #[error("checkpoint contains no Mobius layers")]
    NoMobiusLayers,
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
