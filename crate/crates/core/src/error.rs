use std::path::PathBuf;

use crate::model::NeuronId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {token} is outside the vocabulary (size {vocab})")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("neuron {0} is not valid for this model")]
    InvalidNeuron(NeuronId),

    #[error("edge edit {from} -> {to} does not join adjacent layers")]
    NonAdjacentEdge { from: NeuronId, to: NeuronId },

    #[error("invalid intervention plan: {0}")]
    InvalidPlan(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no attributable signal: every raw attribution score is <= 0")]
    NoAttributableSignal,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum { path: PathBuf, expected: String, found: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
