//! Corpus ingestion and the training loop.

mod dataset;
mod train;

pub use dataset::{build_dataset, split_for, BuildReport, Dataset, Sequence, Split, MIN_SEQUENCE_TOKENS};
pub use train::{crop_loss, evaluate_loss, perplexity, train, LogLine, TrainOptions, TrainOutcome};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}
