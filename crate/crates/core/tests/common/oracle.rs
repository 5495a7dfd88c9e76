//! Scalar-loop reference implementations. Nothing here calls into the
//! ndarray code paths of the crate; parameters are read straight out of the
//! flat vector by slot offset.

use maestro_core::model::{gradients, Mode, ModelConfig, Params, Slot, TrainingBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_array(m: &Matrix) -> ndarray::Array2<f64> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    ndarray::Array2::from_shape_fn((rows, cols), |(i, j)| m[i][j])
}

/// softmax(Q·Kᵀ/√d)·V, one query row at a time. With `causal`, query `i`
/// may look at keys `0..=i + (n_k - n_q)`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Matrix {
    let d = q[0].len() as f64;
    let (n_q, n_k) = (q.len(), k.len());
    let mut out = vec![vec![0.0; v[0].len()]; n_q];
    for i in 0..n_q {
        let last = if causal { i + n_k - n_q } else { n_k - 1 };
        let mut scores = Vec::new();
        for kj in k.iter().take(last + 1) {
            let mut dot = 0.0;
            for c in 0..q[i].len() {
                dot += q[i][c] * kj[c];
            }
            scores.push(dot / d.sqrt());
        }
        let mut max = f64::NEG_INFINITY;
        for &s in &scores {
            if s > max {
                max = s;
            }
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for (j, s) in scores.iter().enumerate() {
            for c in 0..v[j].len() {
                out[i][c] += s / total * v[j][c];
            }
        }
    }
    out
}

/// Mean of `logsumexp(row) - row[target]`.
pub fn cross_entropy(logits: &Matrix, targets: &[u16]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let mut max = f64::NEG_INFINITY;
        for &x in row {
            max = max.max(x);
        }
        let mut sum = 0.0;
        for &x in row {
            sum += (x - max).exp();
        }
        total += max + sum.ln() - row[t as usize];
    }
    total / targets.len() as f64
}

fn get(values: &[f64], slot: Slot, r: usize, c: usize) -> f64 {
    values[slot.offset + r * slot.cols + c]
}

fn norm(x: &[f64], values: &[f64], gain: Slot, bias: Slot) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mean) / sd * get(values, gain, 0, i) + get(values, bias, 0, i))
        .collect()
}

/// `x · W` with W stored row-major as `in × out`.
fn project(x: &[f64], values: &[f64], w: Slot) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *o += xi * get(values, w, i, j);
        }
    }
    out
}

fn gelu(u: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3));
    0.5 * u * (1.0 + inner.tanh())
}

fn position(pos: usize, i: usize, d: usize) -> f64 {
    let exponent = (i - i % 2) as f64 / d as f64;
    let angle = pos as f64 / 10_000f64.powf(exponent);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// The whole decoder stack in evaluation mode, position by position.
pub fn forward(params: &Params<f64>, tokens: &[u16]) -> Matrix {
    let cfg: &ModelConfig = params.config();
    let layout = params.layout();
    let w = params.values();
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;

    let mut x: Matrix = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|i| get(w, layout.embedding, tok as usize, i) + position(t, i, d)).collect())
        .collect();

    for b in &layout.blocks {
        let a: Matrix = x.iter().map(|r| norm(r, w, b.attn_norm_gain, b.attn_norm_bias)).collect();
        let q: Matrix = a.iter().map(|r| project(r, w, b.query)).collect();
        let k: Matrix = a.iter().map(|r| project(r, w, b.key)).collect();
        let v: Matrix = a.iter().map(|r| project(r, w, b.value)).collect();
        let mut concat = vec![vec![0.0; d]; tokens.len()];
        for h in 0..heads {
            let cut = |m: &Matrix| -> Matrix { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
            let o = attention(&cut(&q), &cut(&k), &cut(&v), true);
            for t in 0..tokens.len() {
                concat[t][h * dh..(h + 1) * dh].copy_from_slice(&o[t]);
            }
        }
        for t in 0..tokens.len() {
            let o = project(&concat[t], w, b.output);
            for i in 0..d {
                x[t][i] += o[i];
            }
        }
        for row in x.iter_mut() {
            let f = norm(row, w, b.ff_norm_gain, b.ff_norm_bias);
            let mut hidden = project(&f, w, b.ff_in);
            for (j, u) in hidden.iter_mut().enumerate() {
                *u = gelu(*u + get(w, b.ff_in_bias, 0, j));
            }
            let out = project(&hidden, w, b.ff_out);
            for i in 0..d {
                row[i] += out[i] + get(w, b.ff_out_bias, 0, i);
            }
        }
    }

    x.iter()
        .map(|r| {
            let h = norm(r, w, layout.final_norm_gain, layout.final_norm_bias);
            (0..cfg.vocab_size)
                .map(|tok| (0..d).map(|i| h[i] * get(w, layout.embedding, tok, i)).sum())
                .collect()
        })
        .collect()
}

/// Mean cross-entropy of a batch computed with the scalar forward pass.
pub fn batch_loss(params: &Params<f64>, batch: &TrainingBatch) -> f64 {
    let mut total = 0.0;
    for (x, y) in batch.inputs().iter().zip(batch.targets()) {
        total += cross_entropy(&forward(params, x), y) * y.len() as f64;
    }
    total / batch.token_count() as f64
}

/// Overwrites every weight with noise of order one so that gradients are far
/// from zero and nonlinearities are exercised off their linear regime.
pub fn scramble(params: &mut Params<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.values_mut() {
        *v = rng.random_range(-0.6..0.6);
    }
}

pub struct GradientReport {
    pub worst_relative: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central differences against the analytic gradient for every parameter
/// index in `indices`. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    params: &Params<f64>,
    batch: &TrainingBatch,
    mode: Mode,
    indices: impl IntoIterator<Item = usize>,
    eps: f64,
    floor: f64,
) -> GradientReport {
    let (_, analytic) = gradients(params, batch, mode).expect("gradients");
    let loss_at = |p: &Params<f64>| maestro_core::model::batch_loss(p, batch, mode).expect("loss");
    let mut probe = params.clone();
    let mut report = GradientReport {
        worst_relative: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for i in indices {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = loss_at(&probe);
        probe.values_mut()[i] = orig - eps;
        let down = loss_at(&probe);
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.values()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.worst_relative {
            report.worst_relative = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

/// Iterated greedy decoding with the scalar forward pass, sliding the same
/// window the crate promises (`max_seq_len - 1`).
pub fn greedy(params: &Params<f64>, seed: &[u16], length: usize) -> Vec<u16> {
    let keep = params.config().max_seq_len - 1;
    let mut tokens = seed.to_vec();
    for _ in 0..length {
        let ctx = &tokens[tokens.len().saturating_sub(keep)..];
        let logits = forward(params, ctx);
        let last = logits.last().expect("non-empty");
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        tokens.push(best as u16);
    }
    tokens
}
