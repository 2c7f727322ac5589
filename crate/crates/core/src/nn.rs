//! Small layers shared by the attention variants and the encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::{Bound, ParamId, ParamStore};
use crate::{Graph, Real, Result, Tensor, Var};

pub(crate) fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        if limit > 0.0 {
            T::of(rng.random_range(-limit..limit))
        } else {
            T::zero()
        }
    })
}

/// `y = x · W + b` over the last dimension. `W` is stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = 1.0 / libm::sqrt(d_in as f64);
        let weight = store.insert(format!("{name}.weight"), uniform(&[d_in, d_out], limit, rng))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([d_out]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Layer normalisation with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full([d], T::one()))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros([d]))?,
            eps,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, T::of(self.eps))?;
        let y = g.mul(y, p.var(self.gamma))?;
        g.add(y, p.var(self.beta))
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng)?,
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h);
        self.down.forward(g, p, h)
    }
}

/// Fixed sine/cosine position table of shape `[n, d]`.
pub fn sinusoidal_positions<T: Real>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for k in 0..d {
            let pair = (k / 2) as f64;
            let freq = libm::pow(10_000.0, -2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            let v = if k % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
            data.push(T::of(v));
        }
    }
    Tensor::new([n, d], data).expect("table length matches shape")
}

/// Inverted dropout: zeroes entries with probability `p`, rescales the rest.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: f64,
    rng: &mut R,
) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    });
    let mask = g.constant(mask);
    g.mul(x, mask)
}
