use thiserror::Error;

/// Errors raised by the numeric core, data formats and training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("empty target: every position is ignored")]
    EmptyTarget,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format: expected `{expected}`, found `{found}`")]
    Version { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
