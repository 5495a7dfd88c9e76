use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_last, ModelConfig, ModelError, Params, Real};
use crate::music::TokenSequence;

/// Anything that can score the next token. Implemented by [`Params`]; the
/// server wraps it to count forward passes.
pub trait LanguageModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Logits for the token following `context`.
    fn next_logits(&self, context: &[u16]) -> Result<Vec<f64>, ModelError>;
}

impl<F: Real> LanguageModel for Params<F> {
    fn config(&self) -> &ModelConfig {
        Params::config(self)
    }

    fn next_logits(&self, context: &[u16]) -> Result<Vec<f64>, ModelError> {
        Ok(forward_last(self, context)?
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect())
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn config(&self) -> &ModelConfig {
        (**self).config()
    }

    fn next_logits(&self, context: &[u16]) -> Result<Vec<f64>, ModelError> {
        (**self).next_logits(context)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn config(&self) -> &ModelConfig {
        (**self).config()
    }

    fn next_logits(&self, context: &[u16]) -> Result<Vec<f64>, ModelError> {
        (**self).next_logits(context)
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / temperature)`.
pub fn temperature_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut probs: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

/// Temperature 0 is greedy; otherwise one draw from the tempered softmax.
pub fn sample_logits<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<usize, ModelError> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(ModelError::InvalidTemperature(temperature));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let probs = temperature_probs(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left `acc` a hair under 1
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

fn window<'a>(config: &ModelConfig, tokens: &'a [u16]) -> &'a [u16] {
    let keep = config.max_seq_len - 1;
    &tokens[tokens.len().saturating_sub(keep)..]
}

/// Draws the token that follows `context`.
pub fn sample_next<M: LanguageModel + ?Sized>(
    model: &M,
    context: &TokenSequence,
    temperature: f64,
    rng_seed: u64,
) -> Result<u16, ModelError> {
    let logits = model.next_logits(context.ids())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(sample_logits(&logits, temperature, &mut rng)? as u16)
}

/// Extends `seed_tokens` by `length` sampled tokens and returns seed plus
/// continuation. The model sees at most the last `max_seq_len - 1` tokens.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    seed_tokens: &TokenSequence,
    length: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<TokenSequence, ModelError> {
    if seed_tokens.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tokens = seed_tokens.ids().to_vec();
    tokens.reserve(length);
    for _ in 0..length {
        let logits = model.next_logits(window(model.config(), &tokens))?;
        tokens.push(sample_logits(&logits, temperature, &mut rng)? as u16);
    }
    Ok(TokenSequence::new(tokens).expect("sampled ids are inside the vocabulary"))
}
