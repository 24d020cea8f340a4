use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid assortment: {0}")]
    InvalidAssortment(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("split sizes request {requested} observations but only {available} exist (short by {})", requested - available)]
    SplitOverflow { requested: usize, available: usize },

    #[error("assortment unreachable from some transient state (singular absorbing system)")]
    Unreachable,

    #[error("sample path exceeded {0} steps without reaching the assortment")]
    StepCapExceeded(usize),

    #[error("observation {index} has zero probability under the model")]
    ZeroProbability { index: usize },

    #[error("choice {choice} is not offered in the assortment")]
    ChoiceNotOffered { choice: usize },

    #[error("missing features: {0}")]
    MissingFeatures(String),

    #[error("non-finite loss at epoch {epoch} (learning rate {learning_rate})")]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },

    #[error("non-finite activation at node {0}")]
    NonFinite(usize),

    #[error("incompatible architectures: {0}")]
    Incompatible(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("unknown hotel id {0}")]
    UnknownHotel(String),

    #[error("no rows survived filtering")]
    Empty,

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
