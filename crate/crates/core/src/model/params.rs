use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Real};

const INIT_STD: f64 = 0.02;

/// Position of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSlots {
    pub attn_norm_gain: Slot,
    pub attn_norm_bias: Slot,
    pub query: Slot,
    pub key: Slot,
    pub value: Slot,
    pub output: Slot,
    pub ff_norm_gain: Slot,
    pub ff_norm_bias: Slot,
    pub ff_in: Slot,
    pub ff_in_bias: Slot,
    pub ff_out: Slot,
    pub ff_out_bias: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Where every tensor lives in the flat vector. The token embedding doubles
/// as the output projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Slot,
    pub blocks: Vec<BlockSlots>,
    pub final_norm_gain: Slot,
    pub final_norm_bias: Slot,
    len: usize,
    named: Vec<(String, Slot, Init)>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut named = Vec::new();
        let mut offset = 0;
        let mut alloc = |name: String, rows: usize, cols: usize, init: Init| {
            let slot = Slot { offset, rows, cols };
            offset += slot.len();
            named.push((name, slot, init));
            slot
        };
        let (d, f) = (config.d_model, config.d_ff);
        let embedding = alloc("embedding".into(), config.vocab_size, d, Init::Normal);
        let blocks = (0..config.n_layers)
            .map(|l| BlockSlots {
                attn_norm_gain: alloc(format!("block{l}.attn_norm.gain"), 1, d, Init::Ones),
                attn_norm_bias: alloc(format!("block{l}.attn_norm.bias"), 1, d, Init::Zeros),
                query: alloc(format!("block{l}.attn.query"), d, d, Init::Normal),
                key: alloc(format!("block{l}.attn.key"), d, d, Init::Normal),
                value: alloc(format!("block{l}.attn.value"), d, d, Init::Normal),
                output: alloc(format!("block{l}.attn.output"), d, d, Init::Normal),
                ff_norm_gain: alloc(format!("block{l}.ff_norm.gain"), 1, d, Init::Ones),
                ff_norm_bias: alloc(format!("block{l}.ff_norm.bias"), 1, d, Init::Zeros),
                ff_in: alloc(format!("block{l}.ff.in"), d, f, Init::Normal),
                ff_in_bias: alloc(format!("block{l}.ff.in_bias"), 1, f, Init::Zeros),
                ff_out: alloc(format!("block{l}.ff.out"), f, d, Init::Normal),
                ff_out_bias: alloc(format!("block{l}.ff.out_bias"), 1, d, Init::Zeros),
            })
            .collect();
        let final_norm_gain = alloc("final_norm.gain".into(), 1, d, Init::Ones);
        let final_norm_bias = alloc("final_norm.bias".into(), 1, d, Init::Zeros);
        Self {
            embedding,
            blocks,
            final_norm_gain,
            final_norm_bias,
            len: offset,
            named,
        }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.named.iter().map(|(name, slot, _)| (name.as_str(), *slot))
    }

    /// Name of the tensor holding flat index `index`.
    pub fn tensor_of(&self, index: usize) -> Option<&str> {
        self.named
            .iter()
            .find(|(_, slot, _)| slot.range().contains(&index))
            .map(|(name, _, _)| name.as_str())
    }
}

/// All weights of one model as a single flat vector plus its layout. The same
/// type carries gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F: Real = f64> {
    config: ModelConfig,
    layout: Layout,
    values: Vec<F>,
}

impl<F: Real> Params<F> {
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        let values = vec![F::zero(); layout.len()];
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub(crate) fn from_values(config: &ModelConfig, values: Vec<F>) -> Result<Self, ModelError> {
        let mut params = Self::zeros(config)?;
        if values.len() != params.values.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                params.values.len(),
                values.len()
            )));
        }
        params.values = values;
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: vec![F::zero(); self.values.len()],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn matrix(&self, slot: Slot) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((slot.rows, slot.cols), &self.values[slot.range()])
            .expect("slot matches layout")
    }

    pub fn matrix_mut(&mut self, slot: Slot) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((slot.rows, slot.cols), &mut self.values[slot.range()])
            .expect("slot matches layout")
    }

    pub fn vector(&self, slot: Slot) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.values[slot.range()])
    }

    pub fn vector_mut(&mut self, slot: Slot) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.values[slot.range()])
    }

    /// Same weights at another float width.
    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }
}

/// Deterministic initialization: matrices drawn from N(0, 0.02²), layer-norm
/// gains 1, every bias 0.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> Result<Params<F>, ModelError> {
    let mut params = Params::<F>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let named = params.layout.named.clone();
    for (_, slot, init) in named {
        let values = &mut params.values[slot.range()];
        match init {
            Init::Normal => values
                .iter_mut()
                .for_each(|v| *v = F::lit(normal.sample(&mut rng))),
            Init::Ones => values.fill(F::one()),
            Init::Zeros => values.fill(F::zero()),
        }
    }
    Ok(params)
}
