//! Multivariate series ingestion, sliding windows, channel capping and the
//! lagged-copy synthetic generator.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use icm_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fractions of rows assigned to train and validation; the rest is test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl SplitRatios {
    /// 60/20/20, the ETT benchmark convention.
    pub const ETT: SplitRatios = SplitRatios { train: 0.6, val: 0.2 };
    /// 70/10/20 for every other dataset.
    pub const DEFAULT: SplitRatios = SplitRatios { train: 0.7, val: 0.1 };

    /// Picks the convention from a dataset name (`ETTh1`, `ETTm2`, ...).
    pub fn for_name(name: &str) -> Self {
        if name.starts_with("ETT") {
            Self::ETT
        } else {
            Self::DEFAULT
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.train > 0.0 && self.val >= 0.0 && self.train + self.val < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "split ratios train {} / val {} must leave a non-empty test split",
                self.train, self.val
            )));
        }
        Ok(())
    }

    pub fn bounds(&self, len: usize) -> SplitBounds {
        let train_end = (len as f64 * self.train).floor() as usize;
        let val_end = (len as f64 * (self.train + self.val)).floor() as usize;
        SplitBounds { train_end, val_end }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A `[T, m]` series with named channels and split boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub name: String,
    pub values: Tensor<f64>,
    pub channel_names: Vec<String>,
    pub split: SplitBounds,
}

impl MultivariateSeries {
    pub fn new(
        name: impl Into<String>,
        values: Tensor<f64>,
        channel_names: Vec<String>,
        ratios: SplitRatios,
    ) -> Result<Self> {
        ratios.validate()?;
        let s = values.shape();
        if s.len() != 2 || s[1] != channel_names.len() || s[1] == 0 {
            return Err(Error::Config(format!(
                "series of shape {s:?} does not match {} channel names",
                channel_names.len()
            )));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("series contains non-finite values".into()));
        }
        let split = ratios.bounds(s[0]);
        Ok(MultivariateSeries {
            name: name.into(),
            values,
            channel_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn with_ratios(mut self, ratios: SplitRatios) -> Result<Self> {
        ratios.validate()?;
        self.split = ratios.bounds(self.len());
        Ok(self)
    }

    pub fn region(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.split.train_end,
            Split::Val => self.split.train_end..self.split.val_end,
            Split::Test => self.split.val_end..self.len(),
        }
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values.data()[t * self.channels() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(t, c)).collect()
    }

    /// Standardises every channel with statistics from the train split.
    pub fn standardize(&self) -> (Self, Standardizer) {
        let stats = Standardizer::fit(self, self.region(Split::Train));
        let mut out = self.clone();
        let m = self.channels();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            let c = i % m;
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
        (out, stats)
    }

    /// Writes the series as CSV with a `date` index column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            write!(w, "date")?;
            for name in &self.channel_names {
                write!(w, ",{name}")?;
            }
            writeln!(w)?;
            for t in 0..self.len() {
                write!(w, "{t}")?;
                for c in 0..self.channels() {
                    write!(w, ",{}", self.get(t, c))?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Per-channel mean and standard deviation of a fitting region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(series: &MultivariateSeries, rows: Range<usize>) -> Self {
        let m = series.channels();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for c in 0..m {
            mean[c] = rows.clone().map(|t| series.get(t, c)).sum::<f64>() / n;
            let var = rows.clone().map(|t| (series.get(t, c) - mean[c]).powi(2)).sum::<f64>() / n;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, std }
    }
}

/// Reads a CSV file whose first column is a timestamp and whose other
/// columns are numeric channels. The split convention follows the file name.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    load_csv_with(path, SplitRatios::for_name(&name))
}

pub fn load_csv_with(path: impl AsRef<Path>, ratios: SplitRatios) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| format(e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(format("expected a timestamp column and at least one channel".into()));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let m = channel_names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        // 1-based line numbers, header on line 1
        let row = i + 2;
        let record = record.map_err(|e| format(format!("row {row}: {e}")))?;
        if record.len() != m + 1 {
            return Err(format(format!(
                "row {row}: expected {} fields, found {}",
                m + 1,
                record.len()
            )));
        }
        for (j, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: j + 1,
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(format("no data rows".into()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let values = Tensor::new([rows, m], data)?;
    MultivariateSeries::new(name, values, channel_names, ratios)
}

/// One training example: `input[m, lookback]` followed directly by
/// `target[m, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateWindow {
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
    pub offset: usize,
}

impl MultivariateWindow {
    pub fn channels(&self) -> usize {
        self.input.shape()[0]
    }

    /// Keeps the listed channels, in the given order.
    pub fn select(&self, channels: &[usize]) -> Self {
        let pick = |t: &Tensor<f64>| {
            let len = t.shape()[1];
            let mut data = Vec::with_capacity(channels.len() * len);
            for &c in channels {
                data.extend_from_slice(&t.data()[c * len..(c + 1) * len]);
            }
            Tensor::new([channels.len(), len], data).expect("channel subset")
        };
        MultivariateWindow {
            input: pick(&self.input),
            target: pick(&self.target),
            offset: self.offset,
        }
    }
}

/// Start offsets of every window lying fully inside `split`, plus a warning
/// when the region is too short for even one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowOffsets {
    pub offsets: Vec<usize>,
    pub warning: Option<String>,
}

pub fn window_offsets(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
    split: Split,
) -> WindowOffsets {
    let region = series.region(split);
    let span = lookback + horizon;
    if region.len() < span || stride == 0 {
        let warning = format!(
            "{} {split} split has {} rows, fewer than lookback {lookback} + horizon {horizon}; no windows",
            series.name,
            region.len()
        );
        log::warn!("{warning}");
        return WindowOffsets {
            offsets: Vec::new(),
            warning: Some(warning),
        };
    }
    WindowOffsets {
        offsets: (region.start..=region.end - span).step_by(stride).collect(),
        warning: None,
    }
}

/// The window starting at `offset`: `input = series[offset .. offset + lookback)`,
/// `target` the next `horizon` rows, both channel-major.
pub fn window_at(series: &MultivariateSeries, offset: usize, lookback: usize, horizon: usize) -> MultivariateWindow {
    let m = series.channels();
    let take = |start: usize, len: usize| {
        Tensor::from_fn([m, len], |i| series.get(start + i % len, i / len))
    };
    MultivariateWindow {
        input: take(offset, lookback),
        target: take(offset + lookback, horizon),
        offset,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<MultivariateWindow>,
    pub warning: Option<String>,
}

/// Materialises every window of `split`. Prefer [`window_offsets`] plus
/// [`window_at`] for long series.
pub fn make_windows(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
    split: Split,
) -> WindowSet {
    let WindowOffsets { offsets, warning } = window_offsets(series, lookback, horizon, stride, split);
    WindowSet {
        windows: offsets
            .into_iter()
            .map(|o| window_at(series, o, lookback, horizon))
            .collect(),
        warning,
    }
}

/// Sorted random subset of `cap` channels when the window has more.
pub fn cap_channels(window: &MultivariateWindow, cap: usize, seed: u64) -> MultivariateWindow {
    let m = window.channels();
    if m <= cap || cap == 0 {
        return window.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, m, cap).into_vec();
    keep.sort_unstable();
    window.select(&keep)
}

/// A group of channel indices. The first `scored` entries are new; the rest
/// repeat channels of earlier groups to fill the group to the cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGroup {
    pub channels: Vec<usize>,
    pub scored: usize,
}

/// Splits `m` channels into consecutive groups of `cap`. A short final group
/// is topped up with channels drawn without replacement from the others.
pub fn channel_groups(m: usize, cap: usize, seed: u64) -> Vec<ChannelGroup> {
    if m <= cap || cap == 0 {
        return vec![ChannelGroup {
            channels: (0..m).collect(),
            scored: m,
        }];
    }
    let mut groups = Vec::new();
    let mut start = 0;
    while start < m {
        let end = (start + cap).min(m);
        let mut channels: Vec<usize> = (start..end).collect();
        let scored = channels.len();
        if scored < cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fill = sample(&mut rng, start, cap - scored);
            channels.extend(fill.iter());
        }
        groups.push(ChannelGroup { channels, scored });
        start = end;
    }
    groups
}

/// Parameters of [`generate_lagged_copy`], written
/// `lagged:m=4,lag=16,noise=0.05[,t=20000][,seed=0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaggedCopySpec {
    pub channels: usize,
    pub length: usize,
    pub lag: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for LaggedCopySpec {
    fn default() -> Self {
        LaggedCopySpec {
            channels: 4,
            length: 20_000,
            lag: 16,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl fmt::Display for LaggedCopySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lagged:m={},lag={},noise={},t={},seed={}",
            self.channels, self.lag, self.noise_std, self.length, self.seed
        )
    }
}

impl FromStr for LaggedCopySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("synthetic spec `{s}`: {msg}"));
        let body = s
            .strip_prefix("lagged:")
            .or_else(|| (s == "lagged").then_some(""))
            .ok_or_else(|| bad("expected `lagged:key=value,...`".into()))?;
        let mut spec = LaggedCopySpec::default();
        for part in body.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("`{part}` is not key=value")))?;
            let int = || value.parse::<u64>().map_err(|_| bad(format!("`{value}` is not an integer")));
            match key.trim() {
                "m" => spec.channels = int()? as usize,
                "lag" => spec.lag = int()? as usize,
                "t" | "T" | "len" => spec.length = int()? as usize,
                "seed" => spec.seed = int()?,
                "noise" => {
                    spec.noise_std = value
                        .parse()
                        .map_err(|_| bad(format!("`{value}` is not a number")))?
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(spec)
    }
}

/// AR(1) coefficient of the lagged-copy driver.
pub const DRIVER_PHI: f64 = 0.95;
/// Innovation standard deviation of the driver.
pub const DRIVER_INNOVATION_STD: f64 = 0.3;
/// Period of the driver's sinusoidal component.
pub const DRIVER_PERIOD: f64 = 24.0;

/// Channel 0 is an AR(1) process plus a sinusoid; channel `j` repeats it
/// `j·lag` steps later with added Gaussian noise, so
/// `values[t, j] = values[t − j·lag, 0] + noise`.
pub fn generate_lagged_copy(spec: &LaggedCopySpec) -> Result<MultivariateSeries> {
    let LaggedCopySpec {
        channels: m,
        length: len,
        lag,
        noise_std,
        seed,
    } = *spec;
    if m < 2 {
        return Err(Error::Config(format!("lagged copy needs at least 2 channels, got {m}")));
    }
    if lag == 0 {
        return Err(Error::Config("lag must be positive".into()));
    }
    if len <= m * lag {
        return Err(Error::Config(format!(
            "length {len} must exceed channels × lag = {}",
            m * lag
        )));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise std must be non-negative, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innovation = Normal::new(0.0, DRIVER_INNOVATION_STD).expect("positive std");
    let lead = (m - 1) * lag;
    let total = len + lead;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let stationary = DRIVER_INNOVATION_STD / (1.0 - DRIVER_PHI * DRIVER_PHI).sqrt();
    let mut ar = stationary * Normal::new(0.0, 1.0).expect("unit").sample(&mut rng);
    let mut driver = Vec::with_capacity(total);
    for t in 0..total {
        ar = DRIVER_PHI * ar + innovation.sample(&mut rng);
        driver.push(ar + (std::f64::consts::TAU * t as f64 / DRIVER_PERIOD + phase).sin());
    }
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("positive std"));
    let mut data = Vec::with_capacity(len * m);
    for t in 0..len {
        for j in 0..m {
            let mut v = driver[t + lead - j * lag];
            if j > 0 {
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
            }
            data.push(v);
        }
    }
    let values = Tensor::new([len, m], data)?;
    let names = (0..m).map(|j| format!("ch{j}")).collect();
    MultivariateSeries::new(format!("lagged-m{m}-lag{lag}"), values, names, SplitRatios::DEFAULT)
}
