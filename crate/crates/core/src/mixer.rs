//! Channel-mixing designs compared against the same backbone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::attention::{
    attention_scores, merge_heads, project_qkv, AttentionConfig, MultiHeadAttention,
};
use crate::nn::uniform;
use crate::tensor::{Bound, ParamId, ParamStore};
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Which channel-mixing mechanism a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MixerKind {
    /// Every channel is encoded on its own.
    #[cfg_attr(feature = "serde", serde(rename = "independent"))]
    ChannelIndependent,
    /// All channels flattened into one token sequence with channel biases.
    #[cfg_attr(feature = "serde", serde(rename = "concat"))]
    ChannelConcat,
    /// Infini-Channel Mixer.
    #[cfg_attr(feature = "serde", serde(rename = "icm"))]
    Icm,
    /// ICM plus a learned embedding per channel index.
    #[cfg_attr(feature = "serde", serde(rename = "icm-static"))]
    IcmStatic,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::ChannelIndependent,
        MixerKind::ChannelConcat,
        MixerKind::Icm,
        MixerKind::IcmStatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::ChannelIndependent => "independent",
            MixerKind::ChannelConcat => "concat",
            MixerKind::Icm => "icm",
            MixerKind::IcmStatic => "icm-static",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, MixerKind::Icm | MixerKind::IcmStatic)
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = MixerKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown mixer `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Vanilla attention applied to each channel separately.
pub fn channel_independent_forward<T: Real>(
    g: &mut Graph<'_, T>,
    p: &Bound,
    attn: &MultiHeadAttention,
    x: Var,
) -> Result<Var> {
    attn.forward(g, p, x)
}

/// Same-channel and cross-channel score biases, shared by all layers and heads.
#[derive(Clone, Copy, Debug)]
pub struct ChannelBias {
    pub same: ParamId,
    pub cross: ParamId,
}

impl ChannelBias {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(ChannelBias {
            same: store.insert(format!("{name}.u1"), Tensor::zeros([1]))?,
            cross: store.insert(format!("{name}.u2"), Tensor::zeros([1]))?,
        })
    }
}

/// `[m·n, m·n]` indicator of token pairs that share a channel.
fn same_channel_mask<T: Real>(channels: usize, tokens: usize) -> Tensor<T> {
    let total = channels * tokens;
    Tensor::from_fn([total, total], |i| {
        let (a, b) = (i / total, i % total);
        if a / tokens == b / tokens {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Scores over the flattened sequence: scaled `Q Kᵀ` plus `u1` for
/// same-channel pairs and `u2` otherwise. `q`, `k` are `[h, m·n, d_k]`.
pub fn concat_attention_scores<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    u1: Var,
    u2: Var,
    channels: usize,
) -> Result<Var> {
    let total = g.shape(q)[g.shape(q).len() - 2];
    if channels == 0 || !total.is_multiple_of(channels) {
        return Err(Error::shape("concat_attention_scores", g.shape(q), &[channels]));
    }
    let scores = attention_scores(g, q, k)?;
    let same: Tensor<T> = same_channel_mask(channels, total / channels);
    let cross = same.map(|v| T::one() - v);
    let same = g.constant(same);
    let cross = g.constant(cross);
    let b_same = g.mul(same, u1)?;
    let b_cross = g.mul(cross, u2)?;
    let bias = g.add(b_same, b_cross)?;
    g.add(scores, bias)
}

/// Attention over all channels' tokens at once.
#[derive(Clone, Debug)]
pub struct ConcatAttention {
    pub attn: MultiHeadAttention,
}

impl ConcatAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConcatAttention {
            attn: MultiHeadAttention::new(store, name, cfg, rng)?,
        })
    }

    /// `x[m, n, d]` → `[m, n, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        bias: &ChannelBias,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[0] == 0 {
            return Err(Error::shape("concat_attention", &shape, &[0, 0, self.attn.cfg.d_model]));
        }
        let (m, n, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[m * n, d])?;
        let (q, k, v) = project_qkv(g, p, &self.attn.proj, &self.attn.cfg, flat)?;
        let s = concat_attention_scores(g, q, k, p.var(bias.same), p.var(bias.cross), m)?;
        let w = g.softmax(s)?;
        let a = g.matmul(w, v)?;
        let a = merge_heads(g, a)?;
        let y = self.attn.proj.output.forward(g, p, a)?;
        g.reshape(y, &[m, n, d])
    }
}

/// Learned embedding row per channel index, `[max_channels, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct StaticChannelEmbedding {
    pub table: ParamId,
    pub max_channels: usize,
}

impl StaticChannelEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        max_channels: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.insert(
            String::from(name),
            uniform(&[max_channels, d_model], 0.02, rng),
        )?;
        Ok(StaticChannelEmbedding {
            table,
            max_channels,
        })
    }
}

/// Adds row `c` of `table` to every patch embedding of channel `c`.
///
/// `x` is `[.., m, n_patches, d_model]`. Rows follow channel order, so this
/// deliberately breaks permutation equivariance.
pub fn add_static_channel_embedding<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    table: Var,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ts = g.shape(table).to_vec();
    if xs.len() < 3 || ts.len() != 2 || ts[1] != xs[xs.len() - 1] {
        return Err(Error::shape("add_static_channel_embedding", &xs, &ts));
    }
    let m = xs[xs.len() - 3];
    if m > ts[0] {
        return Err(Error::Capacity {
            requested: m,
            capacity: ts[0],
        });
    }
    let rows = g.slice(table, 0, 0, m)?;
    let rows = g.reshape(rows, &[m, 1, ts[1]])?;
    g.add(x, rows)
}
