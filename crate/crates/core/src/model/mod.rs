//! A decoder-only Transformer written out by hand: pre-norm blocks of causal
//! multi-head self-attention and a GELU feed-forward layer, sinusoidal
//! positions, output projection tied to the token embedding.
//!
//! Parameters are generic over the float width; `f64` is the default and
//! what checkpoints store.

mod checkpoint;
mod config;
mod forward;
mod optim;
mod params;
mod sample;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use forward::{
    attention, batch_loss, forward, forward_last, gradients, gradients_scaled, hidden_states, loss,
    Mode,
    TrainingBatch,
};
pub use optim::{train_step, Optimizer, OptimizerState};
pub use params::{init_params, BlockSlots, Layout, Params, Slot};
pub use sample::{
    argmax, generate, sample_logits, sample_next, temperature_probs, LanguageModel,
};

use std::fmt::Debug;
use std::iter::Sum;

use thiserror::Error;

/// Float types the model runs on.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Sum
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds the context of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("token id {0} outside the model vocabulary")]
    TokenOutOfRange(u16),
    #[error("malformed training batch: {0}")]
    BatchShape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("learning rate {0} must be finite and non-negative")]
    InvalidLearningRate(f64),
    #[error("temperature {0} must be finite and non-negative")]
    InvalidTemperature(f64),
    #[error("model failure: {0}")]
    Backend(String),
}
