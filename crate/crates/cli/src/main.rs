//! `stos`: receptive-field dumps, sensitivity bounds, gradient checks,
//! training runs and the copy / RocketMan experiment grids.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure or bound
//! violation, 4 I/O error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use stos_core::engine::EngineError;
use stos_core::sensitivity::SensitivityError;
use stos_core::spatial::GraphError;
use stos_core::tasks::TaskError;
use stos_core::temporal::TopologyError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Topology(_) | EngineError::Graph(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        match e {
            SensitivityError::Engine(inner) => inner.into(),
            SensitivityError::IndexOutOfRange(_)
            | SensitivityError::NotDecoupled(_)
            | SensitivityError::Topology(_)
            | SensitivityError::Graph(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Io(_) => CliError::Io(e.to_string()),
            TaskError::Engine(inner) => inner.into(),
            TaskError::AllCellsFailed(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stos", version, about = "Spatiotemporal over-squashing toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: config file, then $STOS_OUT_DIR, then ./stos-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write receptive-field matrices of stacked temporal operators.
    Topology(TopologyArgs),
    /// Compare Jacobian norms of a model with the sensitivity bound.
    Bounds(BoundsArgs),
    /// Run (or resume) an experiment grid.
    Experiment(ExperimentArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model on a synthetic task.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopologyKind {
    Standard,
    Normalized,
    Dilated,
}

#[derive(Debug, Args)]
pub struct TopologyArgs {
    #[arg(long = "T", alias = "window", default_value_t = 16)]
    pub window: usize,
    #[arg(long = "P", alias = "kernel", default_value_t = 4)]
    pub kernel: usize,
    /// Operator kinds; repeat or comma-separate.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [TopologyKind::Standard])]
    pub kind: Vec<TopologyKind>,
    /// Layer counts: `8`, `1..8` or `1,4,16`.
    #[arg(long, default_value = "1..8")]
    pub layers: config::Counts,
    /// Dilation reset period.
    #[arg(long)]
    pub reset: Option<usize>,
}

/// Model flags shared by `bounds`, `gradcheck` and `train`.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// `ring:N`, `lollipop:CLIQUE,PATH` or an edge-list file.
    #[arg(long)]
    pub graph: Option<String>,
    #[arg(long = "T", alias = "window")]
    pub window: Option<usize>,
    #[arg(long = "P", alias = "kernel")]
    pub kernel: Option<usize>,
    #[arg(long = "hidden-dim")]
    pub hidden_dim: Option<usize>,
    #[arg(long = "L")]
    pub outer: Option<usize>,
    #[arg(long = "LT")]
    pub temporal_layers: Option<usize>,
    #[arg(long = "LS")]
    pub spatial_layers: Option<usize>,
    /// relu, gelu, tanh or identity.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Random post-encoder states per (u, v, i, j).
    #[arg(long, default_value_t = 4)]
    pub inputs: usize,
    /// Parameter bundle written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also compare the end-to-end Jacobian with J_space J_time.
    #[arg(long)]
    pub check_factorization: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// fig3, fig4-tts or fig4-tas.
    pub name: String,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Restrict fig4 to one graph: ring or lollipop.
    #[arg(long)]
    pub graph: Option<String>,
    /// fig4 kernel sizes.
    #[arg(long = "P", value_delimiter = ',')]
    pub kernel: Option<Vec<usize>>,
    /// fig3 depths, e.g. `1..20`.
    #[arg(long)]
    pub depths: Option<config::Counts>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long)]
    pub stop_below: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Perturb one analytic gradient entry before comparing.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// copy_first, copy_last or rocket_man.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub i: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_batches: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::RunConfig::load(cli.config.as_deref()).and_then(|run| {
        let out = run.out_dir(cli.out.clone());
        match cli.command {
            Command::Topology(args) => commands::topology(&args, &out),
            Command::Bounds(args) => commands::bounds(&args, &run, &out),
            Command::Experiment(args) => commands::experiment(&args, &run, &out),
            Command::Gradcheck(args) => commands::gradcheck(&args, &run, &out),
            Command::Train(args) => commands::train(&args, &run, &out),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stos: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
