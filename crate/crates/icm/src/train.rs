//! Supervised training, β/head fine-tuning and test-split evaluation.

use icm_core::encoder::Encoder;
use icm_core::optim::{Adam, AdamConfig};
use icm_core::tensor::ParamStore;
use icm_core::{DType, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{cap_channels, channel_groups, window_at, window_offsets, MultivariateSeries, Split};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Which parameters an optimiser may update.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMask {
    /// Everything is trainable.
    #[default]
    None,
    /// Only the forecasting heads.
    HeadOnly,
    /// Forecasting heads and the ICM gate scalars.
    HeadAndBeta,
    /// Parameters whose name starts with one of these prefixes.
    Prefixes(Vec<String>),
}

impl FreezeMask {
    pub fn admits(&self, name: &str) -> bool {
        match self {
            FreezeMask::None => true,
            FreezeMask::HeadOnly => is_head(name),
            FreezeMask::HeadAndBeta => is_head(name) || is_gate(name),
            FreezeMask::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// ICM gate logits are named `block.{i}.attn.beta`.
pub fn is_gate(name: &str) -> bool {
    name.starts_with("block.") && name.ends_with(".attn.beta")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub precision: DType,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Optimiser steps per epoch; all training windows when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Evenly spaced subset of validation windows used for model selection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_val_windows: Option<usize>,
    /// Evenly spaced subset of test windows; all of them when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_test_windows: Option<usize>,
    pub freeze: FreezeMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            precision: DType::F32,
            patience: 3,
            max_grad_norm: None,
            steps_per_epoch: None,
            train_stride: 1,
            eval_stride: 1,
            max_val_windows: None,
            max_test_windows: None,
            freeze: FreezeMask::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("batch size and strides must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }
}

/// Test-split error for one horizon, in dataset-standardised units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub mixer: String,
    pub rows: Vec<HorizonMetrics>,
}

impl MetricReport {
    /// Arithmetic means of MSE and MAE over the reported horizons.
    pub fn average(&self) -> Option<(f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some((
            self.rows.iter().map(|r| r.mse).sum::<f64>() / n,
            self.rows.iter().map(|r| r.mae).sum::<f64>() / n,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub test: HorizonMetrics,
    pub epochs: Vec<EpochRecord>,
    /// Batch loss of every optimiser step.
    pub step_losses: Vec<f64>,
    /// Epoch whose parameters were kept (1-based; 0 means the initial model).
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
}

fn evenly_spaced(offsets: Vec<usize>, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k > 0 && offsets.len() > k => {
            let n = offsets.len();
            (0..k).map(|i| offsets[i * n / k]).collect()
        }
        _ => offsets,
    }
}

/// Forecast error on `split`. Series wider than the model's channel cap are
/// scored group by group so that every channel is predicted exactly once.
pub fn evaluate<T: Real>(
    model: &Encoder<T>,
    series: &MultivariateSeries,
    horizon: usize,
    split: Split,
    stride: usize,
    max_windows: Option<usize>,
) -> Result<HorizonMetrics> {
    let lookback = model.config().lookback;
    let offsets = window_offsets(series, lookback, horizon, stride, split).offsets;
    let offsets = evenly_spaced(offsets, max_windows);
    if offsets.is_empty() {
        return Err(Error::Config(format!(
            "{}: no {split} windows for lookback {lookback} and horizon {horizon}",
            series.name
        )));
    }
    let groups = channel_groups(series.channels(), model.config().max_channels, 0);
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    for &o in &offsets {
        let window = window_at(series, o, lookback, horizon);
        for group in &groups {
            let w = window.select(&group.channels);
            let m = group.channels.len();
            let input = w.input.cast::<T>().reshape([1, m, lookback])?;
            let pred = model.forecast(&input, horizon)?;
            for c in 0..group.scored {
                for t in 0..horizon {
                    let e = pred.data()[c * horizon + t].as_f64() - w.target.data()[c * horizon + t];
                    sq += e * e;
                    abs += e.abs();
                    count += 1;
                }
            }
        }
    }
    let mse = sq / count as f64;
    if !mse.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: mse,
        });
    }
    Ok(HorizonMetrics {
        horizon,
        mse,
        mae: abs / count as f64,
        windows: offsets.len(),
    })
}

fn apply_mask<T: Real>(params: &mut ParamStore<T>, mask: &FreezeMask) -> Result<()> {
    params.set_trainable(|name| mask.admits(name));
    if params.num_trainable_scalars() == 0 {
        return Err(Error::Config(format!("freeze mask {mask:?} leaves no trainable parameters")));
    }
    Ok(())
}

/// Minimises the normalised-space MSE on training windows with Adam, keeps
/// the parameters with the best validation MSE and reports test metrics.
///
/// `on_epoch` sees every epoch record as it is produced.
pub fn train_supervised<T: Real>(
    model: &mut Encoder<T>,
    series: &MultivariateSeries,
    horizon: usize,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    apply_mask(model.params_mut(), &cfg.freeze)?;
    let lookback = model.config().lookback;
    let cap = model.config().max_channels;
    let train = window_offsets(series, lookback, horizon, cfg.train_stride, Split::Train);
    if train.offsets.is_empty() {
        return Err(Error::Config(train.warning.unwrap_or_else(|| "no training windows".into())));
    }
    let has_val = !window_offsets(series, lookback, horizon, cfg.eval_stride, Split::Val)
        .offsets
        .is_empty();
    let validate = |model: &Encoder<T>| -> Result<Option<f64>> {
        if !has_val {
            return Ok(None);
        }
        let m = evaluate(model, series, horizon, Split::Val, cfg.eval_stride, cfg.max_val_windows)?;
        Ok(Some(m.mse))
    };

    let mut opt = Adam::new(cfg.adam(), model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_val = validate(model)?;
    let mut best = model.params().clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order = train.offsets.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(limit) = cfg.steps_per_epoch {
            batches.truncate(limit);
        }
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &o in batch.iter() {
                let w = window_at(series, o, lookback, horizon);
                let w = cap_channels(&w, cap, cfg.seed ^ (o as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                inputs.push(w.input.cast::<T>());
                targets.push(w.target.cast::<T>());
            }
            let dropout_rng = (model.config().dropout > 0.0).then_some(&mut rng as &mut dyn rand::RngCore);
            let (loss, grads) = model.loss_and_grads(&inputs, &targets, horizon, dropout_rng)?;
            let loss = loss.as_f64();
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            opt.step(model.params_mut(), &grads)?;
            step_losses.push(loss);
            epoch_loss += loss;
        }
        let val = validate(model)?;
        let record = EpochRecord {
            epoch,
            steps: batches.len(),
            train_loss: epoch_loss / batches.len().max(1) as f64,
            val_mse: val,
        };
        log::info!(
            "{} h={horizon} epoch {epoch}: train {:.5} val {:?}",
            series.name,
            record.train_loss,
            val
        );
        on_epoch(&record);
        epochs.push(record);
        match (val, best_val) {
            (Some(v), Some(b)) if v >= b => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            _ => {
                best_val = val;
                best = model.params().clone();
                best_epoch = epoch;
                stale = 0;
            }
        }
    }
    model.params_mut().load_from(&best)?;
    let test = evaluate(model, series, horizon, Split::Test, cfg.eval_stride, cfg.max_test_windows)?;
    Ok(TrainOutcome {
        test,
        epochs,
        step_losses,
        best_epoch,
        best_val_mse: best_val,
    })
}

/// Trains only the forecasting heads and, when `train_beta` is set, the ICM
/// gate scalars of a pre-trained model. Every other parameter stays bitwise
/// unchanged.
pub fn finetune_beta_and_head<T: Real>(
    model: &mut Encoder<T>,
    series: &MultivariateSeries,
    horizon: usize,
    cfg: &TrainConfig,
    train_beta: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        freeze: if train_beta {
            FreezeMask::HeadAndBeta
        } else {
            FreezeMask::HeadOnly
        },
        ..cfg.clone()
    };
    train_supervised(model, series, horizon, &cfg, on_epoch)
}

/// Forecast for a single window, used by tests and the CLI.
pub fn predict<T: Real>(model: &Encoder<T>, input: &Tensor<f64>, horizon: usize) -> Result<Tensor<f64>> {
    let s = input.shape();
    let x = input.cast::<T>().reshape([1, s[0], s[1]])?;
    let y = model.forecast(&x, horizon)?;
    Ok(y.cast::<f64>().reshape([s[0], horizon])?)
}
