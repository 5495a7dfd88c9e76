//! Forward pass, cross-entropy loss and hand-derived reverse-mode gradients
//! for the pre-norm decoder stack.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockSlots, ModelError, Params, Real};

const NORM_EPS: f64 = 1e-5;

/// Whether dropout is active. Training masks are drawn from `seed`, so a
/// training pass is still a deterministic function of its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Next-token training examples. Rows may differ in length; within a row the
/// targets are the inputs shifted left by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    inputs: Vec<Vec<u16>>,
    targets: Vec<Vec<u16>>,
}

impl TrainingBatch {
    pub fn new(inputs: Vec<Vec<u16>>, targets: Vec<Vec<u16>>) -> Result<Self, ModelError> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(ModelError::BatchShape(format!(
                "{} input rows against {} target rows",
                inputs.len(),
                targets.len()
            )));
        }
        for (i, (x, y)) in inputs.iter().zip(&targets).enumerate() {
            if x.len() != y.len() || x.is_empty() {
                return Err(ModelError::BatchShape(format!(
                    "row {i}: {} inputs against {} targets",
                    x.len(),
                    y.len()
                )));
            }
            if x[1..] != y[..y.len() - 1] {
                return Err(ModelError::BatchShape(format!(
                    "row {i}: targets are not the inputs shifted by one"
                )));
            }
        }
        Ok(Self { inputs, targets })
    }

    /// Splits each window of `n + 1` tokens into `n` inputs and `n` targets.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [u16]>) -> Result<Self, ModelError> {
        let (inputs, targets) = windows
            .into_iter()
            .map(|w| {
                let n = w.len().saturating_sub(1);
                (w[..n].to_vec(), w[1..].to_vec())
            })
            .unzip();
        Self::new(inputs, targets)
    }

    pub fn inputs(&self) -> &[Vec<u16>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<u16>] {
        &self.targets
    }

    pub fn token_count(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

pub(crate) fn sinusoidal_positions<F: Real>(len: usize, d_model: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d_model), |(pos, i)| {
        let pair = (i / 2) as f64 * 2.0;
        let angle = pos as f64 / 10_000f64.powf(pair / d_model as f64);
        F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Row-wise softmax of `q·kᵀ/√d_k`, with keys after each query masked out when
/// `causal` is set (query `i` sees keys `0..=i + (n_k - n_q)`).
pub(crate) fn attention_weights<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    causal: bool,
) -> Array2<F> {
    let scale = F::one() / F::lit(q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    let (n_q, n_k) = scores.dim();
    assert!(!causal || n_q <= n_k, "causal attention needs at least as many keys as queries");
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let visible = if causal { i + (n_k - n_q) + 1 } else { n_k };
        let max = row
            .slice(s![..visible])
            .fold(F::neg_infinity(), |m, &v| m.max(v * scale));
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                *v = (*v * scale - max).exp();
                sum = sum + *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

/// Scaled dot-product attention, `softmax(Q·Kᵀ/√d_k + mask)·V`.
pub fn attention<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    causal: bool,
) -> Array2<F> {
    attention_weights(q, k, causal).dot(&v)
}

struct NormTrace<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
}

fn layer_norm<F: Real>(
    x: ArrayView2<F>,
    gain: ArrayView1<F>,
    bias: ArrayView1<F>,
) -> (Array2<F>, NormTrace<F>) {
    let d = F::lit(x.ncols() as f64);
    let eps = F::lit(NORM_EPS);
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        *s = F::one() / (var + eps).sqrt();
        let r = *s;
        row.mapv_inplace(|v| v * r);
    }
    let out = &normalized * &gain + &bias;
    (out, NormTrace { normalized, inv_std })
}

/// Returns the input gradient and accumulates gain/bias gradients.
fn layer_norm_backward<F: Real>(
    grad_out: &Array2<F>,
    trace: &NormTrace<F>,
    gain: ArrayView1<F>,
    grad_gain: &mut Array1<F>,
    grad_bias: &mut Array1<F>,
) -> Array2<F> {
    *grad_gain += &(grad_out * &trace.normalized).sum_axis(Axis(0));
    *grad_bias += &grad_out.sum_axis(Axis(0));
    let d = F::lit(grad_out.ncols() as f64);
    let mut grad_in = grad_out * &gain;
    for ((mut g, xhat), &r) in grad_in
        .axis_iter_mut(Axis(0))
        .zip(trace.normalized.axis_iter(Axis(0)))
        .zip(trace.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xhat.iter()).fold(F::zero(), |a, (&u, &v)| a + u * v) / d;
        Zip::from(&mut g)
            .and(&xhat)
            .for_each(|gi, &xi| *gi = r * (*gi - mean_g - xi * mean_gx));
    }
    grad_in
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(u: F) -> F {
    let half = F::lit(0.5);
    let t = (F::lit(GELU_C) * (u + F::lit(GELU_A) * u * u * u)).tanh();
    half * u * (F::one() + t)
}

fn gelu_grad<F: Real>(u: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * u * u)
}

fn dropout_mask<F: Real>(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    let keep = F::lit(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

struct BlockTrace<F> {
    attn_norm: NormTrace<F>,
    attn_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    weights: Vec<Array2<F>>,
    heads: Array2<F>,
    attn_mask: Option<Array2<F>>,
    ff_norm: NormTrace<F>,
    ff_in: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
    ff_mask: Option<Array2<F>>,
}

/// Everything the backward pass needs from one sequence's forward pass.
pub(crate) struct Trace<F> {
    blocks: Vec<BlockTrace<F>>,
    final_norm: NormTrace<F>,
    /// Final-norm output, one row per position.
    pub hidden: Array2<F>,
}

fn block_forward<F: Real>(
    params: &Params<F>,
    slots: &BlockSlots,
    x: &mut Array2<F>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> BlockTrace<F> {
    let cfg = params.config();
    let (t, dh) = (x.nrows(), cfg.head_dim());

    let (attn_in, attn_norm) = layer_norm(
        x.view(),
        params.vector(slots.attn_norm_gain),
        params.vector(slots.attn_norm_bias),
    );
    let q = attn_in.dot(&params.matrix(slots.query));
    let k = attn_in.dot(&params.matrix(slots.key));
    let v = attn_in.dot(&params.matrix(slots.value));
    let mut heads = Array2::zeros((t, cfg.d_model));
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let w = attention_weights(q.slice(cols), k.slice(cols), true);
        heads.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        weights.push(w);
    }
    let mut attn_out = heads.dot(&params.matrix(slots.output));
    let attn_mask = rng.as_deref_mut().map(|r| dropout_mask(t, cfg.d_model, cfg.dropout, r));
    if let Some(m) = &attn_mask {
        attn_out *= m;
    }
    *x += &attn_out;

    let (ff_in, ff_norm) = layer_norm(
        x.view(),
        params.vector(slots.ff_norm_gain),
        params.vector(slots.ff_norm_bias),
    );
    let pre_act = ff_in.dot(&params.matrix(slots.ff_in)) + &params.vector(slots.ff_in_bias);
    let act = pre_act.mapv(gelu);
    let mut ff_out = act.dot(&params.matrix(slots.ff_out)) + &params.vector(slots.ff_out_bias);
    let ff_mask = rng.map(|r| dropout_mask(t, cfg.d_model, cfg.dropout, r));
    if let Some(m) = &ff_mask {
        ff_out *= m;
    }
    *x += &ff_out;

    BlockTrace {
        attn_norm,
        attn_in,
        q,
        k,
        v,
        weights,
        heads,
        attn_mask,
        ff_norm,
        ff_in,
        pre_act,
        act,
        ff_mask,
    }
}

fn check_tokens<F: Real>(params: &Params<F>, tokens: &[u16]) -> Result<(), ModelError> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| usize::from(t) >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange(bad));
    }
    Ok(())
}

fn mix_seed(seed: u64, row: u64) -> u64 {
    let mut z = seed ^ row.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn trace_forward<F: Real>(
    params: &Params<F>,
    tokens: &[u16],
    mode: Mode,
    row: u64,
) -> Result<Trace<F>, ModelError> {
    check_tokens(params, tokens)?;
    let cfg = params.config();
    let layout = params.layout();
    let embedding = params.matrix(layout.embedding);
    let mut x = sinusoidal_positions::<F>(tokens.len(), cfg.d_model);
    for (mut row, &tok) in x.axis_iter_mut(Axis(0)).zip(tokens) {
        row += &embedding.row(usize::from(tok));
    }

    let mut rng = match mode {
        Mode::Train { seed } if cfg.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(mix_seed(seed, row))),
        _ => None,
    };
    let blocks = layout
        .blocks
        .iter()
        .map(|slots| block_forward(params, slots, &mut x, rng.as_mut()))
        .collect();
    let (hidden, final_norm) = layer_norm(
        x.view(),
        params.vector(layout.final_norm_gain),
        params.vector(layout.final_norm_bias),
    );
    Ok(Trace {
        blocks,
        final_norm,
        hidden,
    })
}

/// Logits for every position of `tokens`, shape `len × vocab_size`, in
/// evaluation mode.
pub fn forward<F: Real>(params: &Params<F>, tokens: &[u16]) -> Result<Array2<F>, ModelError> {
    let trace = trace_forward(params, tokens, Mode::Eval, 0)?;
    Ok(trace.hidden.dot(&params.matrix(params.layout().embedding).t()))
}

/// Final-norm output for every position, `len × d_model`. The logits are
/// this times the transposed embedding.
pub fn hidden_states<F: Real>(params: &Params<F>, tokens: &[u16]) -> Result<Array2<F>, ModelError> {
    Ok(trace_forward(params, tokens, Mode::Eval, 0)?.hidden)
}

/// Logits for the position after the last token only.
pub fn forward_last<F: Real>(params: &Params<F>, tokens: &[u16]) -> Result<Array1<F>, ModelError> {
    let trace = trace_forward(params, tokens, Mode::Eval, 0)?;
    let last = trace.hidden.row(trace.hidden.nrows() - 1);
    Ok(params.matrix(params.layout().embedding).dot(&last))
}

fn log_sum_exp<F: Real>(row: ArrayView1<F>) -> F {
    let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
    max + row.fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln()
}

/// Summed (not averaged) negative log-likelihood of `targets`.
fn nll_sum<F: Real>(logits: ArrayView2<F>, targets: &[u16]) -> F {
    logits
        .axis_iter(Axis(0))
        .zip(targets)
        .fold(F::zero(), |acc, (row, &t)| acc + log_sum_exp(row) - row[usize::from(t)])
}

/// Mean next-token cross-entropy in nats.
pub fn loss<F: Real>(logits: ArrayView2<F>, targets: &[u16]) -> F {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    nll_sum(logits, targets) / F::lit(targets.len() as f64)
}

/// Mean cross-entropy of a batch under `mode`.
pub fn batch_loss<F: Real>(params: &Params<F>, batch: &TrainingBatch, mode: Mode) -> Result<F, ModelError> {
    let embedding = params.matrix(params.layout().embedding);
    let mut total = F::zero();
    for (row, (inputs, targets)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        let trace = trace_forward(params, inputs, mode, row as u64)?;
        let logits = trace.hidden.dot(&embedding.t());
        total = total + nll_sum(logits.view(), targets);
    }
    Ok(total / F::lit(batch.token_count() as f64))
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn gradients<F: Real>(
    params: &Params<F>,
    batch: &TrainingBatch,
    mode: Mode,
) -> Result<(F, Params<F>), ModelError> {
    gradients_scaled(params, batch, mode, F::one())
}

/// Gradient of `scale · loss`. Returns the unscaled loss.
pub fn gradients_scaled<F: Real>(
    params: &Params<F>,
    batch: &TrainingBatch,
    mode: Mode,
    scale: F,
) -> Result<(F, Params<F>), ModelError> {
    let mut grads = params.zeros_like();
    let norm = F::lit(batch.token_count() as f64);
    let mut total = F::zero();
    for (row, (inputs, targets)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        let trace = trace_forward(params, inputs, mode, row as u64)?;
        total = total + backward(params, &trace, inputs, targets, scale / norm, &mut grads);
    }
    Ok((total / norm, grads))
}

/// Accumulates `weight · ∂(Σ nll)/∂θ` for one sequence; returns Σ nll.
fn backward<F: Real>(
    params: &Params<F>,
    trace: &Trace<F>,
    inputs: &[u16],
    targets: &[u16],
    weight: F,
    grads: &mut Params<F>,
) -> F {
    let cfg = params.config();
    let layout = params.layout();
    let embedding = params.matrix(layout.embedding);
    let dh = cfg.head_dim();

    let mut grad_logits = trace.hidden.dot(&embedding.t());
    let mut nll = F::zero();
    for (mut row, &t) in grad_logits.axis_iter_mut(Axis(0)).zip(targets) {
        let lse = log_sum_exp(row.view());
        nll = nll + lse - row[usize::from(t)];
        row.mapv_inplace(|v| (v - lse).exp() * weight);
        row[usize::from(t)] = row[usize::from(t)] - weight;
    }

    let grad_hidden = grad_logits.dot(&embedding);
    grads
        .matrix_mut(layout.embedding)
        .scaled_add(F::one(), &grad_logits.t().dot(&trace.hidden));

    let mut gain_grad = Array1::zeros(cfg.d_model);
    let mut bias_grad = Array1::zeros(cfg.d_model);
    let mut grad_x = layer_norm_backward(
        &grad_hidden,
        &trace.final_norm,
        params.vector(layout.final_norm_gain),
        &mut gain_grad,
        &mut bias_grad,
    );
    grads.vector_mut(layout.final_norm_gain).scaled_add(F::one(), &gain_grad);
    grads.vector_mut(layout.final_norm_bias).scaled_add(F::one(), &bias_grad);

    for (slots, bt) in layout.blocks.iter().zip(&trace.blocks).rev() {
        // feed-forward branch
        let mut grad_ff = grad_x.clone();
        if let Some(m) = &bt.ff_mask {
            grad_ff *= m;
        }
        grads.matrix_mut(slots.ff_out).scaled_add(F::one(), &bt.act.t().dot(&grad_ff));
        grads.vector_mut(slots.ff_out_bias).scaled_add(F::one(), &grad_ff.sum_axis(Axis(0)));
        let mut grad_pre = grad_ff.dot(&params.matrix(slots.ff_out).t());
        Zip::from(&mut grad_pre)
            .and(&bt.pre_act)
            .for_each(|g, &u| *g = *g * gelu_grad(u));
        grads.matrix_mut(slots.ff_in).scaled_add(F::one(), &bt.ff_in.t().dot(&grad_pre));
        grads.vector_mut(slots.ff_in_bias).scaled_add(F::one(), &grad_pre.sum_axis(Axis(0)));
        let grad_ff_in = grad_pre.dot(&params.matrix(slots.ff_in).t());
        let mut gain_grad = Array1::zeros(cfg.d_model);
        let mut bias_grad = Array1::zeros(cfg.d_model);
        grad_x += &layer_norm_backward(
            &grad_ff_in,
            &bt.ff_norm,
            params.vector(slots.ff_norm_gain),
            &mut gain_grad,
            &mut bias_grad,
        );
        grads.vector_mut(slots.ff_norm_gain).scaled_add(F::one(), &gain_grad);
        grads.vector_mut(slots.ff_norm_bias).scaled_add(F::one(), &bias_grad);

        // attention branch
        let mut grad_attn = grad_x.clone();
        if let Some(m) = &bt.attn_mask {
            grad_attn *= m;
        }
        grads.matrix_mut(slots.output).scaled_add(F::one(), &bt.heads.t().dot(&grad_attn));
        let grad_heads = grad_attn.dot(&params.matrix(slots.output).t());
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut grad_q = Array2::zeros(bt.q.raw_dim());
        let mut grad_k = Array2::zeros(bt.k.raw_dim());
        let mut grad_v = Array2::zeros(bt.v.raw_dim());
        for (h, w) in bt.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let grad_o = grad_heads.slice(cols);
            let grad_w = grad_o.dot(&bt.v.slice(cols).t());
            grad_v.slice_mut(cols).assign(&w.t().dot(&grad_o));
            let mut grad_scores = grad_w;
            for (mut gs, wr) in grad_scores.axis_iter_mut(Axis(0)).zip(w.axis_iter(Axis(0))) {
                let dot = gs.iter().zip(wr.iter()).fold(F::zero(), |a, (&g, &p)| a + g * p);
                Zip::from(&mut gs)
                    .and(&wr)
                    .for_each(|g, &p| *g = p * (*g - dot) * scale);
            }
            grad_q.slice_mut(cols).assign(&grad_scores.dot(&bt.k.slice(cols)));
            grad_k.slice_mut(cols).assign(&grad_scores.t().dot(&bt.q.slice(cols)));
        }
        grads.matrix_mut(slots.query).scaled_add(F::one(), &bt.attn_in.t().dot(&grad_q));
        grads.matrix_mut(slots.key).scaled_add(F::one(), &bt.attn_in.t().dot(&grad_k));
        grads.matrix_mut(slots.value).scaled_add(F::one(), &bt.attn_in.t().dot(&grad_v));
        let grad_attn_in = grad_q.dot(&params.matrix(slots.query).t())
            + grad_k.dot(&params.matrix(slots.key).t())
            + grad_v.dot(&params.matrix(slots.value).t());
        let mut gain_grad = Array1::zeros(cfg.d_model);
        let mut bias_grad = Array1::zeros(cfg.d_model);
        grad_x += &layer_norm_backward(
            &grad_attn_in,
            &bt.attn_norm,
            params.vector(slots.attn_norm_gain),
            &mut gain_grad,
            &mut bias_grad,
        );
        grads.vector_mut(slots.attn_norm_gain).scaled_add(F::one(), &gain_grad);
        grads.vector_mut(slots.attn_norm_bias).scaled_add(F::one(), &bias_grad);
    }

    let mut grad_embedding = grads.matrix_mut(layout.embedding);
    for (row, &tok) in grad_x.axis_iter(Axis(0)).zip(inputs) {
        let mut target = grad_embedding.row_mut(usize::from(tok));
        target += &row;
    }
    nll
}
