//! `stgp`: simulate, fit, predict, diagnose and evaluate divide-and-conquer
//! spatio-temporal models from flat files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(stgp_core::Error),
}

impl From<stgp_core::Error> for CliError {
    fn from(e: stgp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(e) if matches!(e.root(), stgp_core::Error::InvalidArgument(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "stgp", version, about = "Divide-and-conquer Bayesian spatio-temporal regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic panel with its generating truth.
    Simulate(CommonArgs),
    /// Fit subset chains and combine them.
    Fit(CommonArgs),
    /// Predict a test file from a completed fit.
    Predict(CommonArgs),
    /// Moran's I per month and ACF per location, raw or on residuals.
    Diagnose(CommonArgs),
    /// In-sample metrics of a completed fit, with parameter recovery when a
    /// truth file is given.
    Evaluate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fit_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of subsets `Q`.
    #[arg(long)]
    subsets: Option<usize>,
    /// Cap on worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let paths = [("data", &self.data), ("test", &self.test), ("out", &self.out), ("fit_dir", &self.fit_dir)];
        for (key, value) in paths {
            if let Some(p) = value {
                cfg.set(key, p.display().to_string())?;
            }
        }
        if let Some(s) = self.seed {
            cfg.set("seed", s.to_string())?;
        }
        if let Some(q) = self.subsets {
            cfg.set("subsets", q.to_string())?;
        }
        if let Some(w) = self.workers {
            cfg.set("workers", w.to_string())?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Fit(a) => ("fit", a),
        Command::Predict(a) => ("predict", a),
        Command::Diagnose(a) => ("diagnose", a),
        Command::Evaluate(a) => ("evaluate", a),
    };
    let cfg = args.resolve()?;
    if let Some(w) = cfg.optional::<usize>("workers")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {w} workers: {e}")))?;
    }
    match name {
        "simulate" => commands::simulate(&cfg),
        "fit" => commands::fit(&cfg),
        "predict" => commands::predict(&cfg),
        "diagnose" => commands::diagnose(&cfg),
        _ => commands::evaluate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stgp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
