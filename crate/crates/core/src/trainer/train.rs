use std::fmt;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{error, info};

use super::dataset::{eval_windows, random_crop, Sequence, Split};
use super::{Dataset, TrainError};
use crate::model::{
    batch_loss, forward, init_params, loss, train_step, Mode, ModelConfig, ModelError, Optimizer, OptimizerState, Params,
    TrainingBatch,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_every: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            batch_size: 16,
            learning_rate: 3e-3,
            log_every: 100,
            optimizer: Optimizer::default(),
        }
    }
}

/// One progress record. `train_loss` averages the steps since the previous
/// record; `val_loss` is absent when the dataset has no validation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.4}\t", self.step, self.train_loss)?;
        match self.val_loss {
            Some(v) => write!(f, "{v:.4}"),
            None => write!(f, "-"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params<f64>,
    /// Pre-update loss of every step, with dropout active.
    pub step_losses: Vec<f64>,
    pub log: Vec<LogLine>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.rotate_left(17) ^ step.wrapping_mul(0xA076_1D64_78BD_642F)
}

/// Adam on random crops of `max_seq_len + 1` tokens from the training split.
/// `on_log` sees every progress record as it is produced.
pub fn train(
    config: &ModelConfig,
    dataset: &Dataset,
    options: &TrainOptions,
    mut on_log: impl FnMut(&LogLine),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train_set: Vec<&Sequence> = dataset.split(Split::Train).collect();
    if train_set.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if options.batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    let val_set: Vec<&Sequence> = dataset.split(Split::Validation).collect();

    let mut params = init_params::<f64>(config, options.seed)?;
    let mut state = OptimizerState::new(options.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5EED_C409);
    let window = config.max_seq_len + 1;
    let mut step_losses = Vec::with_capacity(options.steps as usize);
    let mut log = Vec::new();
    let mut since_log = Vec::new();

    for step in 1..=options.steps {
        let crops: Vec<&[u16]> = (0..options.batch_size)
            .map(|_| random_crop(&train_set, window, &mut rng))
            .collect();
        let batch = TrainingBatch::from_windows(crops)?;
        let mode = Mode::Train {
            seed: step_seed(options.seed, step),
        };
        let loss = match train_step(&mut params, &mut state, &batch, options.learning_rate, mode) {
            Ok(loss) => loss,
            Err(ModelError::Diverged { loss, .. }) => {
                error!(step, loss, lr = options.learning_rate, "training diverged");
                return Err(TrainError::Diverged { step, loss });
            }
            Err(e) => return Err(e.into()),
        };
        step_losses.push(loss);
        since_log.push(loss);

        if step % options.log_every.max(1) == 0 || step == options.steps {
            let train_loss = since_log.iter().sum::<f64>() / since_log.len() as f64;
            since_log.clear();
            let val_loss = if val_set.is_empty() {
                None
            } else {
                Some(evaluate_loss(&params, val_set.iter().copied())?)
            };
            let line = LogLine {
                step,
                train_loss,
                val_loss,
            };
            info!(step, train_loss, ?val_loss, "progress");
            on_log(&line);
            log.push(line);
        }
    }
    Ok(TrainOutcome {
        params,
        step_losses,
        log,
    })
}

/// Mean next-token cross-entropy (nats) over every prediction in
/// `sequences`, without dropout.
pub fn evaluate_loss<'a>(
    params: &Params<f64>,
    sequences: impl IntoIterator<Item = &'a Sequence>,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (window, first) in eval_windows(sequences, params.config().max_seq_len + 1) {
        let logits = forward(params, &window[..window.len() - 1])?;
        let targets = &window[1..];
        let rows = logits.slice(s![first.., ..]);
        total += loss(rows, &targets[first..]) * (targets.len() - first) as f64;
        count += targets.len() - first;
    }
    if count == 0 {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Eval-mode loss on `count` crops drawn exactly like training batches.
pub fn crop_loss(params: &Params<f64>, dataset: &Dataset, count: usize, seed: u64) -> Result<f64, TrainError> {
    let train_set: Vec<&Sequence> = dataset.split(Split::Train).collect();
    if train_set.is_empty() || count == 0 {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = params.config().max_seq_len + 1;
    let crops: Vec<&[u16]> = (0..count).map(|_| random_crop(&train_set, window, &mut rng)).collect();
    Ok(batch_loss(params, &TrainingBatch::from_windows(crops)?, Mode::Eval)?)
}

/// `exp` of [`evaluate_loss`].
pub fn perplexity<'a>(
    params: &Params<f64>,
    sequences: impl IntoIterator<Item = &'a Sequence>,
) -> Result<f64, TrainError> {
    evaluate_loss(params, sequences).map(f64::exp)
}
