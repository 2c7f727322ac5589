//! Multi-head self-attention and the Infini-Channel Mixer.
//!
//! An ICM layer runs ordinary bidirectional dot-product attention inside each
//! channel and, next to it, a linear-attention read from a compressive memory
//! shared by all channels of the example:
//!
//! ```text
//! M ← M + σ(Kᵢ)ᵀ Vᵢ          z ← z + Σⱼ σ(Kᵢⱼ)            (every channel i)
//! A_mem,i = σ(Qᵢ) M / (σ(Qᵢ) z + ε)
//! Aᵢ      = sigmoid(β) ⊙ A_mem,i + (1 − sigmoid(β)) ⊙ A_dot,i
//! ```
//!
//! with σ = ELU + 1 and one gate scalar β per head. Memory is accumulated over
//! every channel before any channel reads from it, so the layer is
//! equivariant under channel permutations. `M` and `z` live only for one
//! forward pass.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::Linear;
use crate::tensor::{Bound, ParamId, ParamStore};
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Retrieval stabiliser added to the memory read denominator.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub epsilon: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            d_model,
            heads,
            epsilon: DEFAULT_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Per-head key/query/value width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `[.., n, d_model]` → `[.., heads, n, d_k]`.
pub fn split_heads<T: Real>(g: &mut Graph<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 || !shape[rank - 1].is_multiple_of(heads) {
        return Err(Error::shape("split_heads", &shape, &[heads]));
    }
    let mut split = shape[..rank - 1].to_vec();
    split.extend_from_slice(&[heads, shape[rank - 1] / heads]);
    let y = g.reshape(x, &split)?;
    // [.., n, h, dk] → [.., h, n, dk]
    let mut perm: Vec<usize> = (0..rank + 1).collect();
    perm.swap(rank - 2, rank - 1);
    g.permute(y, &perm)
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 3 {
        return Err(Error::shape("merge_heads", &shape, &[]));
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 3, rank - 2);
    let y = g.permute(x, &perm)?;
    let mut merged = shape[..rank - 3].to_vec();
    merged.extend_from_slice(&[shape[rank - 2], shape[rank - 3] * shape[rank - 1]]);
    g.reshape(y, &merged)
}

/// Query, key, value and output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl QkvProjection {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(QkvProjection {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng)?,
        })
    }
}

/// Per-head projections of `x[.., n, d_model]`, each `[.., h, n, d_k]`.
///
/// The same Q, K and V feed both dot-product attention and the memory.
pub fn project_qkv<T: Real>(
    g: &mut Graph<'_, T>,
    p: &Bound,
    proj: &QkvProjection,
    cfg: &AttentionConfig,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if d != cfg.d_model {
        return Err(Error::shape("project_qkv", g.shape(x), &[cfg.d_model]));
    }
    let q = proj.query.forward(g, p, x)?;
    let k = proj.key.forward(g, p, x)?;
    let v = proj.value.forward(g, p, x)?;
    Ok((
        split_heads(g, q, cfg.heads)?,
        split_heads(g, k, cfg.heads)?,
        split_heads(g, v, cfg.heads)?,
    ))
}

/// Memory feature map σ(x) = ELU(x) + 1.
pub fn sigma<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.elu_plus_one(x)
}

/// Compressive memory `M[h, d_k, d_k]` and normaliser `z[h, d_k, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryState {
    pub memory: Var,
    pub normalizer: Var,
}

impl MemoryState {
    pub fn zeros<T: Real>(g: &mut Graph<'_, T>, heads: usize, d_k: usize) -> Self {
        MemoryState {
            memory: g.constant(Tensor::zeros([heads, d_k, d_k])),
            normalizer: g.constant(Tensor::zeros([heads, d_k, 1])),
        }
    }

    fn dims<T: Real>(&self, g: &Graph<'_, T>) -> (usize, usize) {
        let s = g.shape(self.memory);
        (s[0], s[1])
    }
}

fn sum_leading<T: Real>(g: &mut Graph<'_, T>, mut x: Var, keep: usize) -> Result<Var> {
    while g.shape(x).len() > keep {
        x = g.sum_axis(x, 0)?;
    }
    Ok(x)
}

/// Adds channels to the memory.
///
/// `keys` and `values` are `[h, n, d_k]` for one channel, or carry extra
/// leading axes (e.g. `[m, h, n, d_k]`) which are all summed in.
pub fn accumulate_memory<T: Real>(
    g: &mut Graph<'_, T>,
    state: MemoryState,
    keys: Var,
    values: Var,
) -> Result<MemoryState> {
    let (heads, d_k) = state.dims(g);
    let ks = g.shape(keys).to_vec();
    let rank = ks.len();
    if rank < 3 || ks[rank - 3] != heads || ks[rank - 1] != d_k || g.shape(values) != ks.as_slice() {
        return Err(Error::shape("accumulate_memory", &ks, g.shape(values)));
    }
    let sk = sigma(g, keys);
    let skt = g.transpose(sk)?;
    let kv = g.matmul(skt, values)?;
    let kv = sum_leading(g, kv, 3)?;
    let memory = g.add(state.memory, kv)?;

    let zsum = g.sum_axis(sk, rank - 2)?;
    let zsum = sum_leading(g, zsum, 2)?;
    let zsum = g.reshape(zsum, &[heads, d_k, 1])?;
    let normalizer = g.add(state.normalizer, zsum)?;
    Ok(MemoryState { memory, normalizer })
}

/// Linear-attention read: `σ(Q) M / (σ(Q) z + ε)` for `Q[.., h, n, d_k]`.
pub fn retrieve_memory<T: Real>(
    g: &mut Graph<'_, T>,
    queries: Var,
    state: &MemoryState,
    epsilon: f64,
) -> Result<Var> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let sq = sigma(g, queries);
    let num = g.matmul(sq, state.memory)?;
    let den = g.matmul(sq, state.normalizer)?;
    let den = g.add_scalar(den, T::of(epsilon));
    g.div(num, den)
}

/// Scaled dot-product scores `Q Kᵀ / √d_k`, `[.., h, n, n]`.
pub fn attention_scores<T: Real>(g: &mut Graph<'_, T>, q: Var, k: Var) -> Result<Var> {
    let d_k = *g.shape(q).last().unwrap_or(&1);
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    Ok(g.scale(s, T::of(1.0 / libm::sqrt(d_k as f64))))
}

/// Bidirectional `softmax(Q Kᵀ / √d_k) V`.
pub fn dot_attention<T: Real>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = attention_scores(g, q, k)?;
    let w = g.softmax(s)?;
    g.matmul(w, v)
}

/// `sigmoid(β) ⊙ A_mem + (1 − sigmoid(β)) ⊙ A_dot`, with β `[h]` broadcast
/// over `[.., h, n, d_k]`.
pub fn gate_combine<T: Real>(g: &mut Graph<'_, T>, a_mem: Var, a_dot: Var, beta: Var) -> Result<Var> {
    let heads = g.shape(beta).iter().product::<usize>();
    let gate = g.sigmoid(beta);
    let gate = g.reshape(gate, &[heads, 1, 1])?;
    let diff = g.sub(a_mem, a_dot)?;
    let mixed = g.mul(diff, gate)?;
    g.add(a_dot, mixed)
}

/// Vanilla multi-head self-attention over `x[.., n, d_model]`.
///
/// Leading axes are independent, so `x[m, n, d]` attends within each channel.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub proj: QkvProjection,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(MultiHeadAttention {
            cfg,
            proj: QkvProjection::new(store, name, cfg.d_model, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let (q, k, v) = project_qkv(g, p, &self.proj, &self.cfg, x)?;
        let a = dot_attention(g, q, k, v)?;
        let a = merge_heads(g, a)?;
        self.proj.output.forward(g, p, a)
    }
}

/// Attention layer with a cross-channel compressive memory.
#[derive(Clone, Debug)]
pub struct IcmAttention {
    pub attn: MultiHeadAttention,
    /// Per-head gate logits, `[h]`.
    pub beta: ParamId,
}

impl IcmAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, name, cfg, rng)?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros([cfg.heads]))?;
        Ok(IcmAttention { attn, beta })
    }

    /// `x[m, n, d_model]` → `[m, n, d_model]`. A fresh memory is built from
    /// all `m` channels, then every channel reads from it.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 {
            return Err(Error::shape("icm_attention", shape, &[0, 0, self.attn.cfg.d_model]));
        }
        if shape[0] == 0 {
            return Err(Error::Contract("ICM attention needs at least one channel".into()));
        }
        let cfg = &self.attn.cfg;
        let (q, k, v) = project_qkv(g, p, &self.attn.proj, cfg, x)?;

        let state = MemoryState::zeros(g, cfg.heads, cfg.d_k());
        let state = accumulate_memory(g, state, k, v)?;

        let a_dot = dot_attention(g, q, k, v)?;
        let a_mem = retrieve_memory(g, q, &state, cfg.epsilon)?;
        let a = gate_combine(g, a_mem, a_dot, p.var(self.beta))?;
        let a = merge_heads(g, a)?;
        self.attn.proj.output.forward(g, p, a)
    }
}
