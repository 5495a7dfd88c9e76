use serde::{Deserialize, Serialize};

use super::{gradients, Mode, ModelError, Params, Real, TrainingBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        /// Steps over which the learning rate ramps linearly up to its target.
        warmup_steps: u64,
    },
    /// Plain gradient descent, no warmup.
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
        }
    }
}

/// Moments and step counter that persist across [`train_step`] calls.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real = f64> {
    optimizer: Optimizer,
    first: Vec<F>,
    second: Vec<F>,
    step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(optimizer: Optimizer, params: &Params<F>) -> Self {
        let n = match optimizer {
            Optimizer::Adam { .. } => params.len(),
            Optimizer::Sgd => 0,
        };
        Self {
            optimizer,
            first: vec![F::zero(); n],
            second: vec![F::zero(); n],
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One optimizer update on `batch`. Returns the loss measured before the
/// update; a non-finite loss leaves `params` untouched.
pub fn train_step<F: Real>(
    params: &mut Params<F>,
    state: &mut OptimizerState<F>,
    batch: &TrainingBatch,
    learning_rate: f64,
    mode: Mode,
) -> Result<F, ModelError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(ModelError::InvalidLearningRate(learning_rate));
    }
    let (loss, grads) = gradients(params, batch, mode)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(ModelError::Diverged {
            step: state.step,
            loss: loss.to_f64().unwrap_or(f64::NAN),
        });
    }

    match state.optimizer {
        Optimizer::Sgd => {
            let lr = F::lit(learning_rate);
            for (p, &g) in params.values_mut().iter_mut().zip(grads.values()) {
                *p = *p - lr * g;
            }
        }
        Optimizer::Adam {
            beta1,
            beta2,
            eps,
            warmup_steps,
        } => {
            let t = state.step + 1;
            let ramp = if warmup_steps == 0 {
                1.0
            } else {
                (t as f64 / warmup_steps as f64).min(1.0)
            };
            let lr = F::lit(learning_rate * ramp);
            let (b1, b2) = (F::lit(beta1), F::lit(beta2));
            let c1 = F::lit(1.0 - beta1.powi(t as i32));
            let c2 = F::lit(1.0 - beta2.powi(t as i32));
            let eps = F::lit(eps);
            let one = F::one();
            for (((p, &g), m), v) in params
                .values_mut()
                .iter_mut()
                .zip(grads.values())
                .zip(&mut state.first)
                .zip(&mut state.second)
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    state.step += 1;
    Ok(loss)
}
