use std::path::PathBuf;
use std::process::ExitCode;

use busemu::config::ExperimentConfig;
use busemu::error::{Error, Result};
use busemu::experiment::{self, MANIFEST_FILE};
use clap::{Args, Parser, Subcommand};

/// Power-system emulator toolkit: synthetic bus measurements, VARX and
/// weight-dropped LSTM emulators, diagnostics and sweeps.
#[derive(Parser, Debug)]
#[command(name = "busemu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// var | wd-lstm | ft-wd-lstm
    #[arg(long, global = true)]
    model: Option<String>,
    /// regular | randomized | high-order-noise
    #[arg(long, global = true)]
    regime: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate and write the datasets the model/regime pair needs.
    Generate,
    /// Fit the model and write it under <out>/model.
    Fit,
    /// Evaluate a previously fitted model on the regime's test set.
    Evaluate,
    /// Lag, order-criterion and coefficient-decay diagnostics.
    Diagnose,
    /// Generate, fit, evaluate and diagnose in one go.
    Experiment,
    /// Mean NRMSE over a grid of fault resistances.
    Sweep,
    /// Print the effective configuration and exit.
    ShowConfig,
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &c.model {
        cfg.set("model", m)?;
    }
    if let Some(r) = &c.regime {
        cfg.set("regime", r)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let manifest = cfg.out.join(MANIFEST_FILE);
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_text()),
        Command::Generate => {
            experiment::run_generate(&cfg)?;
            println!("datasets written; manifest at {}", manifest.display());
        }
        Command::Fit => {
            experiment::run_fit(&cfg)?;
            println!("{} fitted; manifest at {}", cfg.model, manifest.display());
        }
        Command::Evaluate => {
            let (_, ev) = experiment::run_evaluate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&ev.metrics)?);
        }
        Command::Experiment => {
            let out = experiment::run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.evaluation.metrics)?);
        }
        Command::Diagnose => {
            let (_, d) = experiment::run_diagnose(&cfg)?;
            for l in &d.lags {
                println!("{}-{}: detected lag {}", l.labels.0, l.labels.1, l.detected_lag);
            }
        }
        Command::Sweep => {
            let (_, grid) = experiment::run_sweep(&cfg)?;
            print!("{}", grid.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiment::exit_code(&e) as u8)
        }
    }
}
