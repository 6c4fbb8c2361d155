use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("attention row {row} has no allowed key")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not a registered trainable leaf")]
    NotALeaf(usize),
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
