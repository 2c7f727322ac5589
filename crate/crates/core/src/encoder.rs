//! Patched time-series encoder with linear forecasting heads.
//!
//! Per example `x[m, lookback]`: reversible instance normalisation, split into
//! non-overlapping patches, linear patch embedding plus sinusoidal positions
//! (plus a static channel embedding for [`MixerKind::IcmStatic`]), a stack of
//! pre-norm residual blocks whose attention sublayer is the configured
//! mixer, a final layer norm, and a per-horizon linear head shared by all
//! channels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, IcmAttention, MultiHeadAttention, DEFAULT_EPSILON};
use crate::mixer::{
    add_static_channel_embedding, ChannelBias, ConcatAttention, MixerKind, StaticChannelEmbedding,
};
use crate::nn::{dropout, sinusoidal_positions, FeedForward, LayerNorm, Linear};
use crate::tensor::{Bound, ParamGrads, ParamStore};
use crate::{Error, Graph, Real, Result, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to the per-channel standard deviation before dividing.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub patch_len: usize,
    pub lookback: usize,
    pub mixer: MixerKind,
    pub horizons: Vec<usize>,
    /// Rows of the static channel embedding table.
    pub max_channels: usize,
    /// Memory retrieval stabiliser.
    pub epsilon: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::tiny(MixerKind::Icm)
    }
}

impl EncoderConfig {
    /// 4 blocks, d_model 256, 4 heads, FFN 1024, lookback 256 in 32 patches of 8.
    pub fn tiny(mixer: MixerKind) -> Self {
        EncoderConfig {
            n_blocks: 4,
            d_model: 256,
            heads: 4,
            d_ff: 1024,
            patch_len: 8,
            lookback: 256,
            mixer,
            horizons: vec![96, 192, 384],
            max_channels: 8,
            epsilon: DEFAULT_EPSILON,
            dropout: 0.0,
        }
    }

    /// One-block model used by the gradient checks.
    pub fn shrunken(mixer: MixerKind) -> Self {
        EncoderConfig {
            n_blocks: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            patch_len: 8,
            lookback: 32,
            mixer,
            horizons: vec![8],
            max_channels: 8,
            epsilon: DEFAULT_EPSILON,
            dropout: 0.0,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.lookback / self.patch_len
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.patch_len == 0 || !self.lookback.is_multiple_of(self.patch_len) {
            return Err(Error::Config(format!(
                "lookback {} is not divisible by patch length {}",
                self.lookback, self.patch_len
            )));
        }
        if self.lookback < 2 {
            return Err(Error::Config("lookback must exceed 1".into()));
        }
        if self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_blocks and d_ff must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be a non-empty list of positive lengths".into()));
        }
        let mut sorted = self.horizons.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.horizons.len() {
            return Err(Error::Config("duplicate horizon".into()));
        }
        if self.max_channels == 0 {
            return Err(Error::Config("max_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-channel statistics of a normalised window.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> InstanceStats<T> {
    fn scale(&self, c: usize) -> T {
        self.std[c] + T::of(INSTANCE_NORM_EPS)
    }

    /// Applies `(x − mean) / (std + eps)` per row of `x[m, len]`.
    pub fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.affine(x, false)
    }

    /// Inverse map, `x · (std + eps) + mean`.
    pub fn denormalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.affine(x, true)
    }

    fn affine(&self, x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 2 || s[0] != self.mean.len() {
            return Err(Error::shape("instance_stats", s, &[self.mean.len()]));
        }
        let len = s[1];
        let mut out = x.clone();
        for (c, row) in out.data_mut().chunks_mut(len.max(1)).enumerate() {
            let (mean, scale) = (self.mean[c], self.scale(c));
            for v in row {
                *v = if inverse {
                    *v * scale + mean
                } else {
                    (*v - mean) / scale
                };
            }
        }
        Ok(out)
    }
}

/// Reversible per-channel standardisation of `x[m, lookback]`.
pub fn instance_normalize<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, InstanceStats<T>)> {
    let s = x.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::shape("instance_normalize", s, &[0, 2]));
    }
    let len = s[1];
    let n = T::of(len as f64);
    let mut mean = Vec::with_capacity(s[0]);
    let mut std = Vec::with_capacity(s[0]);
    for row in x.data().chunks(len) {
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        mean.push(mu);
        std.push(var.sqrt());
    }
    let stats = InstanceStats { mean, std };
    Ok((stats.normalize(x)?, stats))
}

/// Splits `x[m, lookback]` into `[m, lookback / patch_len, patch_len]`.
pub fn patchify<T: Real>(x: &Tensor<T>, patch_len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("patchify", s, &[0, patch_len]));
    }
    if patch_len == 0 || !s[1].is_multiple_of(patch_len) {
        return Err(Error::Config(format!(
            "lookback {} is not divisible by patch length {patch_len}",
            s[1]
        )));
    }
    let shape = [s[0], s[1] / patch_len, patch_len];
    x.clone().reshape(shape)
}

#[derive(Clone, Debug)]
enum Mixer {
    Independent(MultiHeadAttention),
    Concat(ConcatAttention),
    Icm(IcmAttention),
}

/// Pre-norm residual block: `x + mix(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    mixer: Mixer,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        bias: Option<&ChannelBias>,
        x: Var,
        drop: f64,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let mut a = match &self.mixer {
            Mixer::Independent(attn) => attn.forward(g, p, h)?,
            Mixer::Concat(attn) => {
                let bias = bias.ok_or_else(|| Error::Contract("concat mixer without channel bias".into()))?;
                attn.forward(g, p, bias, h)?
            }
            Mixer::Icm(attn) => attn.forward(g, p, h)?,
        };
        if let Some(r) = rng.as_deref_mut() {
            a = dropout(g, a, drop, r)?;
        }
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let mut f = self.ffn.forward(g, p, h)?;
        if let Some(r) = rng.as_deref_mut() {
            f = dropout(g, f, drop, r)?;
        }
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub horizon: usize,
    pub linear: Linear,
}

/// The full model: backbone, mixer and forecasting heads.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
    positions: Tensor<T>,
    patch_embed: Linear,
    channel_embedding: Option<StaticChannelEmbedding>,
    channel_bias: Option<ChannelBias>,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    heads: Vec<ForecastHead>,
}

impl<T: Real> Encoder<T> {
    /// Builds a model with seeded random initialisation.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let attn_cfg = config.attention();

        let patch_embed = Linear::new(&mut params, "embed.patch", config.patch_len, d, &mut rng)?;
        let channel_embedding = match config.mixer {
            MixerKind::IcmStatic => Some(StaticChannelEmbedding::new(
                &mut params,
                "embed.channel",
                config.max_channels,
                d,
                &mut rng,
            )?),
            _ => None,
        };
        let channel_bias = match config.mixer {
            MixerKind::ChannelConcat => Some(ChannelBias::new(&mut params, "channel_bias")?),
            _ => None,
        };

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let name = format!("block.{i}");
            let norm1 = LayerNorm::new(&mut params, &format!("{name}.norm1"), d, LAYER_NORM_EPS)?;
            let attn_name = format!("{name}.attn");
            let mixer = match config.mixer {
                MixerKind::ChannelIndependent => {
                    Mixer::Independent(MultiHeadAttention::new(&mut params, &attn_name, attn_cfg, &mut rng)?)
                }
                MixerKind::ChannelConcat => {
                    Mixer::Concat(ConcatAttention::new(&mut params, &attn_name, attn_cfg, &mut rng)?)
                }
                MixerKind::Icm | MixerKind::IcmStatic => {
                    Mixer::Icm(IcmAttention::new(&mut params, &attn_name, attn_cfg, &mut rng)?)
                }
            };
            let norm2 = LayerNorm::new(&mut params, &format!("{name}.norm2"), d, LAYER_NORM_EPS)?;
            let ffn = FeedForward::new(&mut params, &format!("{name}.ffn"), d, config.d_ff, &mut rng)?;
            blocks.push(EncoderBlock {
                norm1,
                mixer,
                norm2,
                ffn,
            });
        }
        let final_norm = LayerNorm::new(&mut params, "norm", d, LAYER_NORM_EPS)?;
        let flat = config.n_patches() * d;
        let mut heads = Vec::with_capacity(config.horizons.len());
        for &h in &config.horizons {
            heads.push(ForecastHead {
                horizon: h,
                linear: Linear::new(&mut params, &format!("head.{h}"), flat, h, &mut rng)?,
            });
        }
        Ok(Encoder {
            positions: sinusoidal_positions(config.n_patches(), d),
            config,
            params,
            patch_embed,
            channel_embedding,
            channel_bias,
            blocks,
            final_norm,
            heads,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Copies every parameter whose name also exists in `other`; returns how
    /// many were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for src in other.iter() {
            if let Some(dst) = self.params.by_name_mut(&src.name) {
                if dst.tensor.shape() != src.tensor.shape() {
                    return Err(Error::shape("load_matching", dst.tensor.shape(), src.tensor.shape()));
                }
                dst.tensor = src.tensor.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    fn head(&self, horizon: usize) -> Result<&ForecastHead> {
        self.heads
            .iter()
            .find(|h| h.horizon == horizon)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown horizon {horizon} (configured: {:?})",
                    self.config.horizons
                ))
            })
    }

    /// Encodes a normalised window `x[m, lookback]` to `[m, n_patches, d_model]`.
    ///
    /// Dropout is applied only when `rng` is given.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        x: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.config.lookback {
            return Err(Error::shape("encode", &s, &[0, self.config.lookback]));
        }
        let m = s[0];
        if m == 0 {
            return Err(Error::Contract("encode needs at least one channel".into()));
        }
        let np = self.config.n_patches();
        let patches = g.reshape(x, &[m, np, self.config.patch_len])?;
        let mut h = self.patch_embed.forward(g, p, patches)?;
        let pos = g.constant(self.positions.clone());
        h = g.add(h, pos)?;
        if let Some(emb) = &self.channel_embedding {
            h = add_static_channel_embedding(g, h, p.var(emb.table))?;
        }
        for block in &self.blocks {
            h = block.forward(g, p, self.channel_bias.as_ref(), h, self.config.dropout, &mut rng)?;
        }
        self.final_norm.forward(g, p, h)
    }

    /// Maps an encoding `[m, n_patches, d_model]` to `[m, horizon]` in
    /// normalised space.
    pub fn head_graph(&self, g: &mut Graph<'_, T>, p: &Bound, enc: Var, horizon: usize) -> Result<Var> {
        let head = self.head(horizon)?;
        let m = g.shape(enc)[0];
        let flat = g.reshape(enc, &[m, self.config.n_patches() * self.config.d_model])?;
        head.linear.forward(g, p, flat)
    }

    fn split_batch(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.lookback {
            return Err(Error::shape("batch", s, &[0, 0, self.config.lookback]));
        }
        Ok((s[0], s[1]))
    }

    fn item(x: &Tensor<T>, i: usize) -> Tensor<T> {
        let s = x.shape();
        let len = s[1] * s[2];
        Tensor::new([s[1], s[2]], x.data()[i * len..(i + 1) * len].to_vec()).expect("slice of batch")
    }

    /// Encodes a raw batch `x[b, m, lookback]` to `[b, m, n_patches, d_model]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, m) = self.split_batch(x)?;
        let mut out = Vec::new();
        for i in 0..b {
            let (xn, _) = instance_normalize(&Self::item(x, i))?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let xv = g.constant(xn);
            let e = self.encode_graph(&mut g, &p, xv, None)?;
            out.extend_from_slice(g.value(e));
        }
        Tensor::new([b, m, self.config.n_patches(), self.config.d_model], out)
    }

    /// Forecasts `[b, m, horizon]` in the input's scale.
    pub fn forecast(&self, x: &Tensor<T>, horizon: usize) -> Result<Tensor<T>> {
        self.head(horizon)?;
        let (b, m) = self.split_batch(x)?;
        let mut out = Vec::with_capacity(b * m * horizon);
        for i in 0..b {
            let (xn, stats) = instance_normalize(&Self::item(x, i))?;
            let y = self.forecast_normalized(&xn, horizon)?;
            out.extend_from_slice(stats.denormalize(&y)?.data());
        }
        Tensor::new([b, m, horizon], out)
    }

    /// Forecast for one already-normalised window.
    pub fn forecast_normalized(&self, x: &Tensor<T>, horizon: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant_ref(x);
        let e = self.encode_graph(&mut g, &p, xv, None)?;
        let y = self.head_graph(&mut g, &p, e, horizon)?;
        Ok(g.tensor(y))
    }

    fn check_pair(&self, input: &Tensor<T>, target: &Tensor<T>, horizon: usize) -> Result<()> {
        let (si, st) = (input.shape(), target.shape());
        if si.len() != 2 || st.len() != 2 || si[0] != st[0] || st[1] != horizon {
            return Err(Error::shape("window", si, st));
        }
        Ok(())
    }

    fn item_loss<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        p: &Bound,
        input: &Tensor<T>,
        target: &Tensor<T>,
        horizon: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_pair(input, target, horizon)?;
        let (xn, stats) = instance_normalize(input)?;
        let yn = stats.normalize(target)?;
        let xv = g.constant(xn);
        let yv = g.constant(yn);
        let e = self.encode_graph(g, p, xv, rng)?;
        let pred = self.head_graph(g, p, e, horizon)?;
        g.mse(pred, yv)
    }

    /// Mean over the batch of the per-window MSE in normalised space.
    pub fn loss(&self, inputs: &[Tensor<T>], targets: &[Tensor<T>], horizon: usize) -> Result<T> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Contract("loss needs matching non-empty batches".into()));
        }
        let mut total = T::zero();
        for (x, y) in inputs.iter().zip(targets) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let l = self.item_loss(&mut g, &p, x, y, horizon, None)?;
            total += g.value(l)[0];
        }
        Ok(total / T::of(inputs.len() as f64))
    }

    /// Batch loss and its gradient for every trainable parameter.
    pub fn loss_and_grads(
        &self,
        inputs: &[Tensor<T>],
        targets: &[Tensor<T>],
        horizon: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(T, ParamGrads<T>)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Contract("loss needs matching non-empty batches".into()));
        }
        let scale = T::one() / T::of(inputs.len() as f64);
        let mut total = T::zero();
        let mut acc: ParamGrads<T> = vec![None; self.params.len()];
        for (x, y) in inputs.iter().zip(targets) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let l = self.item_loss(&mut g, &p, x, y, horizon, r)?;
            total += g.value(l)[0];
            let mut grads = g.backward(l)?;
            for (slot, grad) in acc.iter_mut().zip(self.params.collect_grads(&p, &mut grads)) {
                let Some(grad) = grad else { continue };
                match slot {
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&grad) {
                            *a += *b * scale;
                        }
                    }
                    None => *slot = Some(grad.iter().map(|&v| v * scale).collect()),
                }
            }
        }
        Ok((total * scale, acc))
    }
}
