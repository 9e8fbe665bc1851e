use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("node {0} was never recorded on this tape")]
    UnknownNode(usize),

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("target of {target_len} symbols cannot be aligned to {steps} decoder steps")]
    Unalignable { target_len: usize, steps: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint is missing tensors required by the model: {missing:?}")]
    MissingTensors { missing: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, Error>;

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
