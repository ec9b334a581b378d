use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LmecError>;

#[derive(Debug, Error)]
pub enum LmecError {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data has {len} values but shape ({rows}, {cols}) needs {}", rows * cols)]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("sequence length {n} exceeds maximum position count {max_len}")]
    SequenceTooLong { n: usize, max_len: usize },

    #[error("similarity row {row} sums to zero, cannot normalize")]
    ZeroRowSum { row: usize },

    #[error("expected {expected} position embedding, got {found}")]
    WrongPeStyle {
        expected: &'static str,
        found: &'static str,
    },

    #[error("model dimension {model_dim} is not divisible by {heads} heads")]
    IndivisibleHeads { model_dim: usize, heads: usize },

    #[error("function is not finite at coordinate ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LmecError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        LmecError::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LmecError::Io {
            path: path.into(),
            source,
        }
    }
}
