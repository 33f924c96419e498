use thiserror::Error;

/// Errors surfaced by the public API of this crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("empty index has no pattern")]
    EmptyIndex,

    #[error("arity {0} exceeds the supported maximum {1}")]
    ArityTooLarge(usize, usize),

    #[error("invalid restricted growth string {0:?}")]
    InvalidRgs(Vec<u8>),

    #[error("bell number of arity {0} overflows u64")]
    BellOverflow(usize),

    #[error("index arity mismatch: expected {expected}, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("index entry {0} out of range for n = {1}")]
    IndexOutOfRange(usize, usize),

    #[error("lightweight class sets require k >= 1 and l >= 1 (got {k} -> {l})")]
    LightweightUnsupported { k: usize, l: usize },

    #[error("class is not lightweight: some block holds only input positions")]
    NotLightweight,

    #[error("output index pattern does not match the class output restriction")]
    PatternMismatch,

    #[error("edge projection target order {l} exceeds source order {k}")]
    ProjectionOrder { k: usize, l: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid permutation of {0} nodes")]
    InvalidPermutation(usize),

    #[error("model layers do not chain: layer {idx} expects order {expected}, got {got}")]
    LayerChain { idx: usize, expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
