use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::IdxError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer `{layer}`: {msg}")]
    Build { layer: String, msg: String },
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("data: {0}")]
    Data(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("config: {0}")]
    Config(String),
    /// A loss became non-finite; `last_good` holds the network as it was
    /// before the failing step.
    #[error("training diverged at step {step}: {what} is {value}")]
    Diverged {
        step: usize,
        what: &'static str,
        value: f64,
        last_good: Option<Box<Checkpoint>>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
