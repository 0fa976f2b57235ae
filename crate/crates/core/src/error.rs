use alloc::string::String;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("cannot split: class {0} has no samples")]
    EmptyClass(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
