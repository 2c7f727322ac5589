use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icm::commands;
use icm::config::{parse_mixers, Overrides, RunConfig};
use icm::data::LaggedCopySpec;
use icm::Error;
use icm_core::gradcheck::GradcheckOptions;
use icm_core::mixer::MixerKind;
use icm_core::DType;

#[derive(Parser)]
#[command(name = "icm", version, about = "Train and evaluate channel-mixing time-series encoders")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mixer on every dataset and horizon.
    Train(RunArgs),
    /// Train several mixers with identical data and seeds and tabulate them.
    Compare {
        /// Comma-separated mixers, e.g. `independent,icm`.
        #[arg(long)]
        mixers: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference gradient check of the shrunken configuration.
    Gradcheck {
        /// Mixers to check; all four when omitted.
        #[arg(long, value_delimiter = ',')]
        mixer: Vec<MixerKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Test metrics of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic series to CSV.
    Synth {
        /// e.g. `lagged:m=4,lag=16,noise=0.05,t=20000,seed=0`
        #[arg(long)]
        synthetic: LaggedCopySpec,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mixer: Option<MixerKind>,
    /// CSV dataset (repeatable).
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Synthetic dataset spec, e.g. `lagged:m=4,lag=16,noise=0.05`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fine-tune only heads (false) or heads and gates (true) of `--init`.
    #[arg(long)]
    finetune_beta: Option<bool>,
    #[arg(long)]
    precision: Option<DType>,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name.
    #[arg(long)]
    name: Option<String>,
    /// Checkpoint to initialise from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            name: self.name.clone(),
            out: self.out.clone(),
            init: self.init.clone(),
            finetune_beta: self.finetune_beta,
            mixer: self.mixer,
            compare: None,
            data: self.data.clone(),
            synthetic: self.synthetic.clone(),
            horizons: self.horizons.clone(),
            lookback: self.lookback,
            seed: self.seed,
            precision: self.precision,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }

    fn resolve(&self, compare: Option<Vec<MixerKind>>) -> icm::Result<RunConfig> {
        let mut flags = self.overrides();
        flags.compare = compare;
        let cfg = RunConfig::resolve(self.config.as_deref(), &flags)?;
        for source in cfg.data.sources()? {
            if let Some(path) = commands::missing_file(&source) {
                return Err(Error::Io {
                    path: path.to_path_buf(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found"),
                });
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> icm::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let out = commands::train(&args.resolve(None)?)?;
            print!("{}", out.summary);
            println!("run directory: {}", out.dir.display());
        }
        Command::Compare { mixers, run } => {
            let mixers = parse_mixers(&mixers)?;
            let out = commands::compare(&run.resolve(Some(mixers))?)?;
            print!("{}", out.summary);
            println!("run directory: {}", out.dir.display());
        }
        Command::Gradcheck { mixer, seed, tolerance } => {
            let mixers = if mixer.is_empty() { MixerKind::ALL.to_vec() } else { mixer };
            let opts = GradcheckOptions {
                tolerance,
                ..GradcheckOptions::default()
            };
            let results = commands::gradcheck(&mixers, seed, opts)?;
            print!("{}", commands::format_gradcheck(&results));
            if results.iter().any(|(_, r)| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval { checkpoint, run } => {
            let expect_model = run.config.is_some() || run.overrides().touches_model();
            let cfg = run.resolve(None)?;
            let reports = commands::eval(&checkpoint, &cfg, expect_model, run.horizons.as_deref())?;
            for r in &reports {
                print!("{}", commands::format_report(r));
            }
        }
        Command::Synth { synthetic, out } => {
            let series = commands::synth(&synthetic, &out)?;
            println!(
                "wrote {} rows x {} channels to {}",
                series.len(),
                series.channels(),
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Model(icm_core::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
