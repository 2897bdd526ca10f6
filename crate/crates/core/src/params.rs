//! Learnable tensors, their initialisation and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Model dimensions. Relation rows are laid out as forward relations
/// `0..n_rel`, their reverses `n_rel..2·n_rel`, then the NA row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding dimension.
    pub d: usize,
    /// Assumption (pair) representation dimension.
    pub d_p: usize,
    /// Attention hidden dimension.
    pub d_a: usize,
    /// Number of forward relations.
    pub n_rel: usize,
}

impl ModelDims {
    /// `d_p` and `d_a` default to `d`.
    pub fn new(d: usize, n_rel: usize) -> Self {
        Self {
            d,
            d_p: d,
            d_a: d,
            n_rel,
        }
    }

    pub fn n_rel_total(&self) -> usize {
        2 * self.n_rel + 1
    }

    pub fn na_index(&self) -> usize {
        2 * self.n_rel
    }

    pub fn reverse_of(&self, k: usize) -> usize {
        debug_assert!(k < self.n_rel);
        k + self.n_rel
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_p == 0 || self.d_a == 0 || self.n_rel == 0 {
            return Err(Error::InvalidArgument(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::new(128, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    EntityEmb,
    ContextEmb,
    RelationEmb,
    Wp,
    Bp,
    Wa,
    Ba,
    V,
    Wr,
    Br,
}

impl ParamId {
    /// Canonical order; also the checkpoint block order.
    pub const ALL: [ParamId; 10] = [
        ParamId::EntityEmb,
        ParamId::ContextEmb,
        ParamId::RelationEmb,
        ParamId::Wp,
        ParamId::Bp,
        ParamId::Wa,
        ParamId::Ba,
        ParamId::V,
        ParamId::Wr,
        ParamId::Br,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::EntityEmb => "entity_emb",
            ParamId::ContextEmb => "context_emb",
            ParamId::RelationEmb => "relation_emb",
            ParamId::Wp => "w_p",
            ParamId::Bp => "b_p",
            ParamId::Wa => "w_a",
            ParamId::Ba => "b_a",
            ParamId::V => "v",
            ParamId::Wr => "w_r",
            ParamId::Br => "b_r",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.name() == name)
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Entity embeddings `υ`, shared by all three losses.
    pub entity_emb: Tensor,
    /// Context embeddings `υ′`, used only by recall.
    pub context_emb: Tensor,
    /// Relation matrix with forward, reverse and NA rows.
    pub relation_emb: Tensor,
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub w_a: Tensor,
    pub b_a: Tensor,
    pub v: Tensor,
    pub w_r: Tensor,
    pub b_r: Tensor,
}

impl ModelParams {
    /// All-zero parameters of the right shapes.
    pub fn zeros(dims: ModelDims, vocab_size: usize) -> Self {
        let ModelDims { d, d_p, d_a, .. } = dims;
        Self {
            dims,
            entity_emb: Tensor::zeros(vocab_size, d),
            context_emb: Tensor::zeros(vocab_size, d),
            relation_emb: Tensor::zeros(dims.n_rel_total(), d),
            w_p: Tensor::zeros(3 * d, d_p),
            b_p: Tensor::zeros(1, d_p),
            w_a: Tensor::zeros(d_a, d_p),
            b_a: Tensor::zeros(1, d_a),
            v: Tensor::zeros(1, d_a),
            w_r: Tensor::zeros(1, d_p),
            b_r: Tensor::zeros(1, 1),
        }
    }

    /// Embeddings uniform in `±0.5/d`, dense weights Glorot-uniform, biases zero.
    pub fn init(dims: ModelDims, vocab_size: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if vocab_size == 0 {
            return Err(Error::Empty("vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims, vocab_size);
        let emb_bound = 0.5 / dims.d as f64;
        for t in [&mut p.entity_emb, &mut p.context_emb, &mut p.relation_emb] {
            fill_uniform(t, emb_bound, &mut rng);
        }
        // (tensor, fan_in, fan_out)
        let ModelDims { d, d_p, d_a, .. } = dims;
        fill_uniform(&mut p.w_p, glorot(3 * d, d_p), &mut rng);
        fill_uniform(&mut p.w_a, glorot(d_p, d_a), &mut rng);
        fill_uniform(&mut p.v, glorot(d_a, 1), &mut rng);
        fill_uniform(&mut p.w_r, glorot(d_p, 1), &mut rng);
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.entity_emb.rows()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::EntityEmb => &self.entity_emb,
            ParamId::ContextEmb => &self.context_emb,
            ParamId::RelationEmb => &self.relation_emb,
            ParamId::Wp => &self.w_p,
            ParamId::Bp => &self.b_p,
            ParamId::Wa => &self.w_a,
            ParamId::Ba => &self.b_a,
            ParamId::V => &self.v,
            ParamId::Wr => &self.w_r,
            ParamId::Br => &self.b_r,
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::EntityEmb => &mut self.entity_emb,
            ParamId::ContextEmb => &mut self.context_emb,
            ParamId::RelationEmb => &mut self.relation_emb,
            ParamId::Wp => &mut self.w_p,
            ParamId::Bp => &mut self.b_p,
            ParamId::Wa => &mut self.w_a,
            ParamId::Ba => &mut self.b_a,
            ParamId::V => &mut self.v,
            ParamId::Wr => &mut self.w_r,
            ParamId::Br => &mut self.b_r,
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamId::ALL.iter().all(|&id| self.tensor(id).is_finite())
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_uniform(t: &mut Tensor, bound: f64, rng: &mut ChaCha8Rng) {
    for x in t.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
}

/// Gradient buffers, allocated lazily per tensor. Tensors without a buffer
/// are left untouched by [`AdamState::step`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: [Option<Tensor>; 10],
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero-initialised buffer for `id`, shaped like the parameter.
    pub fn slot(&mut self, id: ParamId, params: &ModelParams) -> &mut Tensor {
        self.slots[id.index()].get_or_insert_with(|| {
            let (r, c) = params.tensor(id).shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.index()].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.slots[id.index()].as_mut()
    }

    pub fn insert(&mut self, id: ParamId, t: Tensor) {
        self.slots[id.index()] = Some(t);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        ParamId::ALL
            .into_iter()
            .filter(|id| self.slots[id.index()].is_some())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// `self += other`, allocating buffers as needed.
    pub fn accumulate(&mut self, other: &Gradients) {
        for id in other.ids() {
            let src = other.get(id).expect("id listed");
            match &mut self.slots[id.index()] {
                Some(dst) => {
                    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(src.clone()),
            }
        }
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor Adam moments and step counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros = |id: ParamId| {
            let (r, c) = params.tensor(id).shape();
            Tensor::zeros(r, c)
        };
        Self {
            config,
            first: ParamId::ALL.into_iter().map(zeros).collect(),
            second: ParamId::ALL.into_iter().map(zeros).collect(),
            steps: vec![0; ParamId::ALL.len()],
        }
    }

    /// One bias-corrected Adam update on every tensor that has a gradient.
    /// Nothing is modified if any gradient is non-finite or misshapen.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        for id in grads.ids() {
            let g = grads.get(id).expect("id listed");
            let expected = params.tensor(id).shape();
            if g.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name: id.name(),
                    expected,
                    got: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(id.name()));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for id in grads.ids() {
            let g = grads.get(id).expect("id listed");
            let k = id.index();
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let p = params.tensor_mut(id);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.bump_version();
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}
