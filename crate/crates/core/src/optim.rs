//! Adaptive-moment (Adam) optimiser over a [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{ParamGrads, ParamStore};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::Config(alloc::format!(
                "learning rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        let zeros = |p: &crate::tensor::Parameter<T>| vec![T::zero(); p.tensor.len()];
        Ok(Adam {
            cfg,
            steps: 0,
            first: store.iter().map(zeros).collect(),
            second: store.iter().map(zeros).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract("gradient list does not match parameter store".into()));
        }
        let mut clip = 1.0;
        if let Some(max_norm) = self.cfg.max_grad_norm {
            let sq: f64 = store
                .iter()
                .zip(grads)
                .filter(|(p, _)| p.trainable)
                .filter_map(|(_, g)| g.as_ref())
                .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
                .sum();
            let norm = libm::sqrt(sq);
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        let lr = T::of(self.cfg.learning_rate);
        let (b1t, b2t, eps, clip) = (T::of(b1), T::of(b2), T::of(self.cfg.eps), T::of(clip));
        let (c1, c2) = (T::of(c1), T::of(c2));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
