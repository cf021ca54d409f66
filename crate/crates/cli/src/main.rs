//! `trange`: train sequence models, measure their temporal range, and check
//! the measurement against closed forms and window ablations.
//!
//! Every command writes fixed file names into `--out-dir` together with a
//! `manifest.json`. Exit codes: 0 success, 1 failed check or numerical
//! failure, 2 usage or input error.

mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "trange", version, about = "Temporal range of sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a hand-built checkpoint (shift-copy, memoryless or scalar linear).
    Build(BuildArgs),
    /// Generate a task dataset.
    GenData(GenDataArgs),
    /// Train a recurrent model on a task.
    Train(TrainArgs),
    /// Compute the temporal range report of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Cross-check the Jacobian pipeline against closed-form oracles.
    Oracle(OracleArgs),
    /// Run the axiom property suite on random linear maps.
    Axioms(AxiomArgs),
    /// Evaluate a checkpoint with truncated context windows.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    RepeatFirst,
    Cartpole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Full,
    Stateless,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HideArg {
    Velocities,
    Positions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    /// Copy offset.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 32)]
    pub len: usize,
    #[arg(long, default_value_t = 4)]
    pub vocab: usize,
    /// CartPole observation variant.
    #[arg(long, value_enum, default_value_t = VariantArg::Stateless)]
    pub variant: VariantArg,
    /// CartPole coordinates removed in the stateless variants.
    #[arg(long, value_enum, default_value_t = HideArg::Velocities)]
    pub hide: HideArg,
    /// Observation noise std for the noisy variant.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuildKind {
    ShiftCopy,
    Memoryless,
    Linear,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BuildArgs {
    #[arg(long, value_enum)]
    pub kind: BuildKind,
    /// Shift-copy delay.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Input and output dimension.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Hidden width of the memoryless map.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Scalar state transition of the linear model.
    #[arg(long, default_value_t = 0.9)]
    pub a: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Gru,
    Lstm,
    Lem,
    Linear,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, value_enum, default_value_t = ModelArg::Gru)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Width of a tanh input encoder; identity when absent.
    #[arg(long)]
    pub encoder_width: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub lem_dt: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_val: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub clip: f64,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    pub stop_at: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    /// Skip the finite-difference gradient spot check.
    #[arg(long)]
    pub no_fd_check: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    Frobenius,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggArg {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Multi,
    Final,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataSource {
    /// Dataset file; otherwise one is generated from the task flags.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Seed for generated data.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
    /// Number of rollouts analyzed.
    #[arg(long, default_value_t = 32)]
    pub rollouts: usize,
    /// Analysis window; defaults to the rollout length.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, value_enum, default_value_t = NormArg::Frobenius)]
    pub norm: NormArg,
    #[arg(long, value_enum, default_value_t = AggArg::Mean)]
    pub agg: AggArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Multi)]
    pub mode: ModeArg,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random recurrences and random maps checked.
    #[arg(long, default_value_t = 20)]
    pub specs: usize,
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    /// Scale one autodiff weight before comparison.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AxiomArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = NormArg::Frobenius)]
    pub norm: NormArg,
    /// Check a range function with lags shifted by one.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
    /// Number of sequences evaluated; all when absent.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = temporal_range::ablation::DEFAULT_WINDOWS)]
    pub windows: Vec<usize>,
    /// Temporal range report whose value is marked on the chart.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Evaluate windows of ceil(rho_hat) and half of it.
    #[arg(long, requires = "report")]
    pub deploy: bool,
    /// Fraction of the baseline that defines the knee.
    #[arg(long, default_value_t = temporal_range::ablation::DEFAULT_KNEE_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(a) => commands::build(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Oracle(a) => commands::oracle(&a),
        Command::Axioms(a) => commands::axioms(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
