//! `glip`: phantom generation, training, sweeps, evaluation and plots.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or configuration error.
//! Every override flag can also be set through a `GLIP_*` environment variable; the log
//! level comes from `GLIP_LOG` (default `info`).

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glip_core::metrics::GroupKey;
use glip_core::{DecodeRule, LossKind};

#[derive(Debug, Parser)]
#[command(name = "glip", version, about = "Heatmap landmark localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom {
        #[arg(long, env = "GLIP_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples; overrides `phantom.count`.
        #[arg(long, env = "GLIP_COUNT")]
        count: Option<usize>,
    },
    /// Run (or resume) all CV folds of one configuration and evaluate the ensemble on the test set.
    Train(TrainArgs),
    /// Hyperparameter grid search or one-dimensional sensitivity sweep.
    Sweep {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Train and compare the patch-based second stage against the first stage.
    SecondStage {
        #[command(flatten)]
        common: TrainArgs,
        /// Sweep the full patch grid instead of the single configured point.
        #[arg(long)]
        grid: bool,
    },
    /// Merge reports and write grouped aggregates.
    Eval {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "quality", value_parser = parse_from_str::<GroupKey>)]
        group_by: GroupKey,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG figures from reports.
    Plot {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Sample shown by the plane plot (default: first sample of the first report).
        #[arg(long)]
        sample: Option<String>,
    },
    /// Print the default experiment configuration as TOML.
    DefaultConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Sigma,
    Lambda,
    Grid,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotKind {
    Box,
    Sdr,
    Plane,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, env = "GLIP_CONFIG")]
    config: PathBuf,
    /// Dataset directory containing `manifest.json`.
    #[arg(long, env = "GLIP_DATA")]
    data: PathBuf,
    /// Runs root; each configuration lands in `<out>/<hash>/`.
    #[arg(long, env = "GLIP_OUT")]
    out: PathBuf,
    /// Restrict to these folds (comma separated).
    #[arg(long, value_delimiter = ',')]
    only_folds: Option<Vec<usize>>,
    /// Parallel fold workers.
    #[arg(long, env = "GLIP_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags mirroring configuration fields; patch fields carry a `patch-` prefix.
#[derive(Debug, Default, Args)]
struct Overrides {
    #[arg(long, env = "GLIP_LOSS", value_parser = parse_from_str::<LossKind>)]
    loss: Option<LossKind>,
    /// Heatmap sigma (mm).
    #[arg(long, env = "GLIP_SIGMA")]
    sigma: Option<f64>,
    #[arg(long, env = "GLIP_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, env = "GLIP_ADD_GRID_PENALTY")]
    add_grid_penalty: Option<bool>,
    #[arg(long, env = "GLIP_ONE_SIDED_PENALTY")]
    one_sided_penalty: Option<bool>,
    #[arg(long, env = "GLIP_SQUARED_DISTANCE")]
    squared_distance: Option<bool>,
    #[arg(long, env = "GLIP_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "GLIP_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "GLIP_FOLDS")]
    folds: Option<usize>,
    #[arg(long, env = "GLIP_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "GLIP_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, env = "GLIP_DOWNSAMPLE")]
    downsample: Option<usize>,
    #[arg(long, env = "GLIP_RESAMPLE_SPACING")]
    resample_spacing: Option<f64>,
    #[arg(long, env = "GLIP_DEPTH")]
    depth: Option<usize>,
    #[arg(long, env = "GLIP_BASE_CHANNELS")]
    base_channels: Option<usize>,
    #[arg(long, env = "GLIP_BATCH_NORM")]
    batch_norm: Option<bool>,
    #[arg(long, env = "GLIP_DECODE", value_parser = parse_from_str::<DecodeRule>)]
    decode: Option<DecodeRule>,
    #[arg(long, env = "GLIP_DIVERGENCE_PATIENCE")]
    divergence_patience: Option<usize>,
    #[arg(long, env = "GLIP_PATCH_SIZE")]
    patch_size: Option<usize>,
    #[arg(long, env = "GLIP_PATCH_DISTURBANCE")]
    patch_disturbance: Option<usize>,
    #[arg(long, env = "GLIP_PATCH_SIGMA")]
    patch_sigma: Option<f64>,
    #[arg(long, env = "GLIP_PATCH_LAMBDA")]
    patch_lambda: Option<f64>,
    #[arg(long, env = "GLIP_PATCH_EPOCHS")]
    patch_epochs: Option<usize>,
    #[arg(long, env = "GLIP_PATCH_BATCH_SIZE")]
    patch_batch_size: Option<usize>,
}

fn parse_from_str<T: std::str::FromStr<Err = glip_core::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: glip_core::Error| e.to_string())
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<glip_core::Error> for CliError {
    fn from(e: glip_core::Error) -> Self {
        match e {
            glip_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Phantom { config, out, count } => commands::phantom(&config, &out, count),
        Command::Train(args) => commands::train(&args),
        Command::Sweep { common, axis } => commands::sweep(&common, axis),
        Command::SecondStage { common, grid } => commands::second_stage(&common, grid),
        Command::Eval { reports, group_by, out } => commands::eval(&reports, group_by, &out),
        Command::Plot { reports, kind, out, sample } => plot::plot(&reports, kind, &out, sample.as_deref()),
        Command::DefaultConfig => {
            print!("{}", glip_core::ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GLIP_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
