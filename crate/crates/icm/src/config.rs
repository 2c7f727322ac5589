//! Run configuration: defaults, a TOML file and command-line overrides, in
//! increasing order of precedence.

use std::fs;
use std::path::{Path, PathBuf};

use icm_core::encoder::EncoderConfig;
use icm_core::mixer::MixerKind;
use icm_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, load_csv_with, generate_lagged_copy, LaggedCopySpec, MultivariateSeries, SplitRatios};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV files, each trained and reported separately.
    pub paths: Vec<PathBuf>,
    /// Synthetic series spec such as `lagged:m=4,lag=16,noise=0.05`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<String>,
    /// Overrides the split convention derived from the file name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRatios>,
}

/// One dataset to train or evaluate on.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Lagged(LaggedCopySpec),
}

impl DataSource {
    /// Loads the raw series.
    pub fn load(&self, split: Option<SplitRatios>) -> Result<MultivariateSeries> {
        match (self, split) {
            (DataSource::Csv(path), None) => load_csv(path),
            (DataSource::Csv(path), Some(r)) => load_csv_with(path, r),
            (DataSource::Lagged(spec), None) => generate_lagged_copy(spec),
            (DataSource::Lagged(spec), Some(r)) => generate_lagged_copy(spec)?.with_ratios(r),
        }
    }
}

impl DataConfig {
    pub fn sources(&self) -> Result<Vec<DataSource>> {
        let mut out: Vec<DataSource> = self.paths.iter().cloned().map(DataSource::Csv).collect();
        if let Some(spec) = &self.synthetic {
            out.push(DataSource::Lagged(spec.parse()?));
        }
        if out.is_empty() {
            return Err(Error::Config("no data given (use --data <path> or --synthetic <spec>)".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Parent of the run directory.
    pub out: PathBuf,
    /// Checkpoint to start from instead of a fresh initialisation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// When set, only heads (and β if true) are trained.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_beta: Option<bool>,
    /// Variants trained by `compare`.
    pub compare: Vec<MixerKind>,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: None,
            out: PathBuf::from("runs"),
            init: None,
            finetune_beta: None,
            compare: Vec::new(),
            model: EncoderConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Values given on the command line; `None` keeps the file or default value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub name: Option<String>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub finetune_beta: Option<bool>,
    pub mixer: Option<MixerKind>,
    pub compare: Option<Vec<MixerKind>>,
    pub data: Vec<PathBuf>,
    pub synthetic: Option<String>,
    pub horizons: Option<Vec<usize>>,
    pub lookback: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<DType>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl Overrides {
    /// Whether any flag pins part of the model architecture.
    pub fn touches_model(&self) -> bool {
        self.mixer.is_some() || self.lookback.is_some()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults, then `file`, then `flags`; the result is validated.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.name {
            self.name = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = &o.init {
            self.init = Some(v.clone());
        }
        if let Some(v) = o.finetune_beta {
            self.finetune_beta = Some(v);
        }
        if let Some(v) = o.mixer {
            self.model.mixer = v;
        }
        if let Some(v) = &o.compare {
            self.compare = v.clone();
        }
        if !o.data.is_empty() || o.synthetic.is_some() {
            self.data.paths = o.data.clone();
            self.data.synthetic = o.synthetic.clone();
        }
        if let Some(v) = &o.horizons {
            self.model.horizons = v.clone();
        }
        if let Some(v) = o.lookback {
            self.model.lookback = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.precision {
            self.train.precision = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(r) = &self.data.split {
            r.validate()?;
        }
        if let Some(spec) = &self.data.synthetic {
            spec.parse::<LaggedCopySpec>()?;
        }
        Ok(())
    }

    /// Run directory name: the explicit name, else `<mixer>-<dataset>`, or
    /// `compare-<dataset>` when comparing variants.
    pub fn run_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let data = self
            .data
            .paths
            .first()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .or_else(|| self.data.synthetic.as_ref().map(|_| "lagged".to_string()))
            .unwrap_or_else(|| "run".into());
        if self.compare.is_empty() {
            format!("{}-{data}", self.model.mixer)
        } else {
            format!("compare-{data}")
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_name())
    }
}

/// Parses `96,192,384`.
pub fn parse_horizons(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&h| h > 0)
                .ok_or_else(|| Error::Config(format!("`{p}` is not a positive horizon")))
        })
        .collect()
}

/// Parses `independent,icm`.
pub fn parse_mixers(s: &str) -> Result<Vec<MixerKind>> {
    let kinds = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<MixerKind>().map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("empty mixer list".into()));
    }
    Ok(kinds)
}
