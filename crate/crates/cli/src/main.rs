//! `inclino`: smoothing, forecasting, anomaly detection and hold-out
//! validation for inclinometer borehole readings.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inclino_core::{ErrorKind, GateMode, KlMarginal};
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] inclino_core::Error),
    #[error("borehole {id}: {source}")]
    Borehole {
        id: String,
        #[source]
        source: inclino_core::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) | CliError::Borehole { source: e, .. } => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Parse => 3,
                ErrorKind::Numerical => 4,
                ErrorKind::InsufficientData => 5,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "inclino", version, about = "Inclinometer state-space pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Smoothed state trajectory and anomaly report per borehole.
    Smooth(DataArgs),
    /// Forecast with 1-sigma and 2-sigma predictive bands.
    Forecast(DataArgs),
    /// Anomaly gating report only.
    Detect(DataArgs),
    /// Hold-out forecast validation metric per borehole.
    Validate(DataArgs),
    /// Synthetic borehole readings in the input CSV schema.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Grid spacing in days.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Smoother window in grid steps.
    #[arg(long)]
    window: Option<usize>,
    /// Forecast horizon in days.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    forecast_dt: Option<f64>,
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long)]
    em_max_iters: Option<usize>,
    /// Default instrument error coefficient in mm/m.
    #[arg(long)]
    eps_m: Option<f64>,
    #[arg(long)]
    no_gating: bool,
    #[arg(long, value_parser = parse_gate_mode)]
    gate_mode: Option<GateMode>,
    #[arg(long, value_parser = parse_kl_marginal)]
    kl_marginal: Option<KlMarginal>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-borehole processing; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct DataArgs {
    /// Reading CSV files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct SimulateArgs {
    /// Output CSV file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    boreholes: Option<usize>,
    /// Comma-separated depths in metres.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sigma_true: Option<f64>,
    /// Initial A-axis velocity in mm/day.
    #[arg(long)]
    initial_velocity: Option<f64>,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_gate_mode(s: &str) -> Result<GateMode, String> {
    match s {
        "joint" => Ok(GateMode::Joint),
        "per-depth" => Ok(GateMode::PerDepth),
        _ => Err(format!("expected joint or per-depth, got {s:?}")),
    }
}

fn parse_kl_marginal(s: &str) -> Result<KlMarginal, String> {
    match s {
        "full4d" => Ok(KlMarginal::Full4d),
        "position2d" => Ok(KlMarginal::Position2d),
        _ => Err(format!("expected full4d or position2d, got {s:?}")),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.dt.is_some() {
            c.dt_override = self.dt;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.horizon {
            c.forecast_horizon = v;
        }
        if self.forecast_dt.is_some() {
            c.forecast_dt = self.forecast_dt;
        }
        if let Some(v) = self.em_tol {
            c.em_tol = v;
        }
        if let Some(v) = self.em_max_iters {
            c.em_max_iters = v;
        }
        if self.eps_m.is_some() {
            c.eps_m = self.eps_m;
        }
        if self.no_gating {
            c.gating_enabled = false;
        }
        if let Some(v) = self.gate_mode {
            c.gate_mode = v;
        }
        if let Some(v) = self.kl_marginal {
            c.kl_marginal = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        Ok(c)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, CliError> {
        if self.jobs == Some(0) {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Smooth(a) => data_command(a, commands::Kind::Smooth),
        Command::Forecast(a) => data_command(a, commands::Kind::Forecast),
        Command::Detect(a) => data_command(a, commands::Kind::Detect),
        Command::Validate(a) => data_command(a, commands::Kind::Validate),
        Command::Simulate(a) => {
            let mut c = a.run.resolve()?;
            let s = &mut c.simulate;
            if let Some(v) = a.boreholes {
                s.boreholes = v;
            }
            if let Some(v) = a.depths {
                s.depths = v;
            }
            if let Some(v) = a.steps {
                s.steps = v;
            }
            if let Some(v) = a.sigma_true {
                s.sigma_true = v;
            }
            if let Some(v) = a.initial_velocity {
                s.initial_velocity = v;
            }
            if let Some(v) = a.run.dt {
                s.dt = v;
            }
            if let Some(v) = a.run.eps_m {
                s.eps_m = v;
            }
            // simulation noise may be zero, which the data default may not be
            c.eps_m = None;
            c.dt_override = None;
            c.validate()?;
            commands::simulate(&c, a.output.as_deref())
        }
    }
}

fn data_command(a: DataArgs, kind: commands::Kind) -> Result<(), CliError> {
    let config = a.run.resolve()?;
    config.validate()?;
    let pool = a.run.thread_pool()?;
    pool.install(|| commands::process(kind, &config, &a.inputs, &a.out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
