//! Central finite-difference verification of model gradients.
//!
//! Every scalar of every parameter is perturbed by ±h and the resulting loss
//! difference is compared with the autodiff gradient. Errors are reported per
//! parameter tensor ("group") using
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! gradients that are zero up to rounding from producing spurious ratios.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    /// Parameter paths whose error exceeds the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_err < self.tolerance))
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }

    pub fn num_checked(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    /// Turns a failing report into an error naming the offending parameters.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::Contract(alloc::format!(
                "gradient check failed for: {}",
                self.failing().join(", ")
            )))
        }
    }
}

/// Checks every trainable parameter of `model` on one batch.
pub fn gradcheck(
    model: &mut Encoder<f64>,
    inputs: &[Tensor<f64>],
    targets: &[Tensor<f64>],
    horizon: usize,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, analytic) = model.loss_and_grads(inputs, targets, horizon, None)?;
    let h = opts.step;
    let mut groups = Vec::new();
    for idx in 0..model.params().len() {
        let Some(grad) = analytic[idx].clone() else {
            continue;
        };
        let name = model.params().iter().nth(idx).map(|p| p.name.clone()).unwrap_or_default();
        let mut report = GroupReport {
            name,
            count: grad.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_abs_grad: 0.0,
        };
        for (j, &a) in grad.iter().enumerate() {
            let orig = param_value(model, idx, j);
            set_param_value(model, idx, j, orig + h);
            let plus = model.loss(inputs, targets, horizon)?;
            set_param_value(model, idx, j, orig - h);
            let minus = model.loss(inputs, targets, horizon)?;
            set_param_value(model, idx, j, orig);

            let numeric = (plus - minus) / (2.0 * h);
            let abs_err = (a - numeric).abs();
            let rel = abs_err / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
        }
        groups.push(report);
    }
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

fn param_value(model: &Encoder<f64>, idx: usize, j: usize) -> f64 {
    model.params().iter().nth(idx).expect("index in range").tensor.data()[j]
}

fn set_param_value(model: &mut Encoder<f64>, idx: usize, j: usize, v: f64) {
    model
        .params_mut()
        .iter_mut()
        .nth(idx)
        .expect("index in range")
        .tensor
        .data_mut()[j] = v;
}

/// Builds a model from `config` with generic (non-zero) gate and bias values
/// and a random batch in `[-2, 2]`, then runs [`gradcheck`].
pub fn gradcheck_config(
    config: EncoderConfig,
    channels: usize,
    batch: usize,
    seed: u64,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let horizon = *config
        .horizons
        .first()
        .ok_or_else(|| Error::Config("no horizon configured".into()))?;
    let lookback = config.lookback;
    let mut model = Encoder::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in model.params_mut().iter_mut() {
        let generic = p.name.ends_with(".beta") && p.name.contains("attn")
            || p.name.starts_with("channel_bias")
            || p.name.ends_with("norm1.beta")
            || p.name.ends_with("norm2.beta");
        if generic {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        inputs.push(Tensor::from_fn([channels, lookback], |_| rng.random_range(-2.0..2.0)));
        targets.push(Tensor::from_fn([channels, horizon], |_| rng.random_range(-2.0..2.0)));
    }
    gradcheck(&mut model, &inputs, &targets, horizon, opts)
}
