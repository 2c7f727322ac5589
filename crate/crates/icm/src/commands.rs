//! The work behind each command-line subcommand.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use icm_core::encoder::Encoder;
use icm_core::gradcheck::{gradcheck_config, GradcheckOptions, GradcheckReport};
use icm_core::mixer::MixerKind;
use icm_core::{DType, Real};
use serde_json::json;

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{generate_lagged_copy, LaggedCopySpec, MultivariateSeries, Split};
use crate::train::{evaluate, finetune_beta_and_head, train_supervised, HorizonMetrics, MetricReport};
use crate::{Error, Result};

/// Where a run wrote its files and what it measured.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub reports: Vec<MetricReport>,
    pub summary: String,
}

struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl RunFiles {
    fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        let ckpt = dir.join("checkpoint");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let config_path = dir.join("config.toml");
        fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        let metrics_path = dir.join("metrics.jsonl");
        let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(RunFiles {
            dir,
            metrics: BufWriter::new(file),
        })
    }

    fn record(&mut self, value: serde_json::Value) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        writeln!(self.metrics, "{value}").map_err(|e| Error::io(&path, e))
    }

    fn finish(mut self, summary: &str) -> Result<PathBuf> {
        let path = self.dir.join("metrics.jsonl");
        self.metrics.flush().map_err(|e| Error::io(&path, e))?;
        let path = self.dir.join("summary.txt");
        fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
        Ok(self.dir)
    }
}

/// Loads every configured dataset and standardises it with train statistics.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<MultivariateSeries>> {
    cfg.data
        .sources()?
        .iter()
        .map(|s| Ok(s.load(cfg.data.split)?.standardize().0))
        .collect()
}

fn initial_model<T: Real>(cfg: &RunConfig, horizon: usize) -> Result<Encoder<T>> {
    match &cfg.init {
        Some(path) => {
            let (model, header) = checkpoint::load::<T>(path)?;
            checkpoint::ensure_compatible(&header.config, &cfg.model)?;
            if !header.config.horizons.contains(&horizon) {
                return Err(Error::Checkpoint {
                    version: checkpoint::VERSION,
                    message: format!(
                        "{} has no head for horizon {horizon} (heads: {:?})",
                        path.display(),
                        header.config.horizons
                    ),
                });
            }
            Ok(model)
        }
        None => Ok(Encoder::new(cfg.model.clone(), cfg.train.seed)?),
    }
}

fn train_dataset<T: Real>(
    cfg: &RunConfig,
    series: &MultivariateSeries,
    files: &mut RunFiles,
    ckpt_prefix: &str,
) -> Result<MetricReport> {
    let mixer = cfg.model.mixer.to_string();
    let mut rows = Vec::new();
    for &horizon in &cfg.model.horizons {
        let mut model = initial_model::<T>(cfg, horizon)?;
        let outcome = match cfg.finetune_beta {
            Some(beta) => finetune_beta_and_head(&mut model, series, horizon, &cfg.train, beta, &mut |_| {})?,
            None => train_supervised(&mut model, series, horizon, &cfg.train, &mut |_| {})?,
        };
        for e in &outcome.epochs {
            files.record(json!({
                "dataset": series.name, "mixer": mixer, "horizon": horizon,
                "epoch": e.epoch, "steps": e.steps, "train_loss": e.train_loss, "val_mse": e.val_mse,
            }))?;
        }
        let t = outcome.test;
        files.record(json!({
            "dataset": series.name, "mixer": mixer, "horizon": horizon, "split": "test",
            "mse": t.mse, "mae": t.mae, "windows": t.windows, "best_epoch": outcome.best_epoch,
        }))?;
        let meta = [
            ("dataset".to_string(), series.name.clone()),
            ("horizon".to_string(), horizon.to_string()),
        ]
        .into_iter()
        .collect();
        let path = files
            .dir
            .join("checkpoint")
            .join(format!("{ckpt_prefix}{}-h{horizon}.ckpt", series.name));
        checkpoint::save(&path, &model, meta)?;
        rows.push(t);
    }
    Ok(MetricReport {
        dataset: series.name.clone(),
        mixer,
        rows,
    })
}

/// Per-horizon table with the average row.
pub fn format_report(report: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dataset {}  mixer {}", report.dataset, report.mixer);
    let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>8}", "horizon", "mse", "mae", "windows");
    for r in &report.rows {
        let _ = writeln!(s, "{:>8} {:>10.6} {:>10.6} {:>8}", r.horizon, r.mse, r.mae, r.windows);
    }
    if let Some((mse, mae)) = report.average() {
        let _ = writeln!(s, "{:>8} {:>10.6} {:>10.6}", "average", mse, mae);
    }
    s
}

/// Rows are variants, columns datasets, cells the horizon-averaged MSE.
pub fn format_comparison(reports: &[MetricReport]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "variant");
    for d in &datasets {
        let _ = write!(s, " {:>20}", d);
    }
    let _ = writeln!(s);
    for r in reports.chunks(datasets.len().max(1)) {
        let _ = write!(s, "{:<12}", r[0].mixer);
        for cell in r {
            let mse = cell.average().map(|a| a.0).unwrap_or(f64::NAN);
            let _ = write!(s, " {:>20.6}", mse);
        }
        let _ = writeln!(s);
    }
    s
}

fn run_train<T: Real>(cfg: &RunConfig) -> Result<RunOutput> {
    let datasets = load_datasets(cfg)?;
    let mut files = RunFiles::create(cfg)?;
    let mut reports = Vec::new();
    let mut summary = String::new();
    for series in &datasets {
        let report = train_dataset::<T>(cfg, series, &mut files, "")?;
        summary.push_str(&format_report(&report));
        reports.push(report);
    }
    let dir = files.finish(&summary)?;
    Ok(RunOutput { dir, reports, summary })
}

/// Trains the configured mixer on every dataset and horizon.
pub fn train(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.train.precision {
        DType::F32 => run_train::<f32>(cfg),
        DType::F64 => run_train::<f64>(cfg),
    }
}

fn run_compare<T: Real>(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.compare.is_empty() {
        return Err(Error::Config("compare needs at least one mixer".into()));
    }
    let datasets = load_datasets(cfg)?;
    let mut files = RunFiles::create(cfg)?;
    let mut reports = Vec::new();
    let mut detail = String::new();
    for (i, &kind) in cfg.compare.iter().enumerate() {
        let mut variant = cfg.clone();
        variant.model.mixer = kind;
        for series in &datasets {
            let report = train_dataset::<T>(&variant, series, &mut files, &format!("{i}-{kind}-"))?;
            detail.push_str(&format_report(&report));
            reports.push(report);
        }
    }
    let summary = format!("{}\n{detail}", format_comparison(&reports));
    let dir = files.finish(&summary)?;
    Ok(RunOutput { dir, reports, summary })
}

/// Trains every listed mixer with identical data and seeds.
pub fn compare(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.train.precision {
        DType::F32 => run_compare::<f32>(cfg),
        DType::F64 => run_compare::<f64>(cfg),
    }
}

/// Double-precision gradient check of the shrunken configuration.
pub fn gradcheck(mixers: &[MixerKind], seed: u64, opts: GradcheckOptions) -> Result<Vec<(MixerKind, GradcheckReport)>> {
    mixers
        .iter()
        .map(|&k| {
            let cfg = icm_core::encoder::EncoderConfig::shrunken(k);
            Ok((k, gradcheck_config(cfg, 2, 2, seed, opts)?))
        })
        .collect()
}

pub fn format_gradcheck(results: &[(MixerKind, GradcheckReport)]) -> String {
    let mut s = String::new();
    for (kind, report) in results {
        let _ = writeln!(
            s,
            "{kind}: {} ({} scalars, max rel err {:.3e}, tolerance {:e})",
            if report.passed() { "PASS" } else { "FAIL" },
            report.num_checked(),
            report.max_rel_err(),
            report.tolerance
        );
        for g in &report.groups {
            let _ = writeln!(
                s,
                "  {:<28} {:>6} {:>11.3e} {}",
                g.name,
                g.count,
                g.max_rel_err,
                if g.max_rel_err < report.tolerance { "ok" } else { "FAIL" }
            );
        }
    }
    s
}

fn run_eval<T: Real>(
    path: &Path,
    cfg: &RunConfig,
    expect_model: bool,
    horizons: Option<&[usize]>,
) -> Result<Vec<MetricReport>> {
    let (model, header) = checkpoint::load::<T>(path)?;
    if expect_model {
        checkpoint::ensure_compatible(&header.config, &cfg.model)?;
    }
    let horizons: Vec<usize> = match horizons {
        Some(h) => h.to_vec(),
        None => match header.meta.get("horizon").and_then(|h| h.parse().ok()) {
            Some(h) => vec![h],
            None => header.config.horizons.clone(),
        },
    };
    let mut reports = Vec::new();
    for series in load_datasets(cfg)? {
        let rows = horizons
            .iter()
            .map(|&h| evaluate(&model, &series, h, Split::Test, cfg.train.eval_stride, cfg.train.max_test_windows))
            .collect::<Result<Vec<HorizonMetrics>>>()?;
        reports.push(MetricReport {
            dataset: series.name.clone(),
            mixer: header.config.mixer.to_string(),
            rows,
        });
    }
    Ok(reports)
}

/// Test metrics of a saved model. With `expect_model`, the checkpoint's
/// architecture must match `cfg.model`.
pub fn eval(path: &Path, cfg: &RunConfig, expect_model: bool, horizons: Option<&[usize]>) -> Result<Vec<MetricReport>> {
    match checkpoint::read_header(path)?.dtype {
        DType::F32 => run_eval::<f32>(path, cfg, expect_model, horizons),
        DType::F64 => run_eval::<f64>(path, cfg, expect_model, horizons),
    }
}

/// Generates a synthetic series and writes it as CSV.
pub fn synth(spec: &LaggedCopySpec, path: &Path) -> Result<MultivariateSeries> {
    let series = generate_lagged_copy(spec)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    series.write_csv(path)?;
    Ok(series)
}

/// Whether a data source names a file that does not exist.
pub fn missing_file(source: &DataSource) -> Option<&Path> {
    match source {
        DataSource::Csv(p) if !p.exists() => Some(p),
        _ => None,
    }
}
