//! `dac` — generate datasets, train, evaluate, verify, plot and time
//! diffusion actor-critic runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dac_core::DacError;

#[derive(Debug, Parser)]
#[command(name = "dac", version, about = "Diffusion actor-critic for offline reinforcement learning")]
pub struct Cli {
    /// Seed for every random stream of the command (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for run outputs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file and its metadata sidecar.
    MakeData(MakeDataArgs),
    /// Train a policy and critic ensemble on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its synthetic environment.
    Eval(EvalArgs),
    /// Run the numeric self-checks.
    Verify(VerifyArgs),
    /// Render behavior data, Q level curves and policy samples.
    Plot(PlotArgs),
    /// Time one training step under soft and denoised guidance.
    BenchStep(BenchArgs),
    /// Print the noise schedule tables.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Env {
    Bandit,
    Lq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Guidance {
    Soft,
    Hard,
    Denoised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EtaModeArg {
    Constant,
    Learnable,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long, value_enum)]
    pub env: Env,
    /// Transition count (bandit default 400, LQ default 10000).
    #[arg(long)]
    pub n: Option<usize>,
    /// Bandit behavior layout: ring, crescent, grid or two-mode.
    #[arg(long, default_value = "ring")]
    pub pattern: String,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub reward_noise_std: Option<f64>,
    /// Multiplier at which the LQ sidecar records the closed-form optimum.
    #[arg(long, default_value_t = 1.0)]
    pub oracle_eta: f64,
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, value_enum)]
    pub guidance: Option<Guidance>,
    #[arg(long, value_enum)]
    pub eta_mode: Option<EtaModeArg>,
    /// Initial multiplier.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Behavior-cloning threshold (learnable multiplier only).
    #[arg(long)]
    pub b: Option<f64>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory, or a run directory with a `latest` pointer.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset file the checkpoint was trained on (its sidecar names the environment).
    #[arg(long)]
    pub data: PathBuf,
    /// Expected environment; must agree with the dataset sidecar.
    #[arg(long, value_enum)]
    pub env: Option<Env>,
    #[arg(long, default_value_t = 80)]
    pub rollouts: usize,
    /// Candidate actions per extraction.
    #[arg(long, default_value_t = 10)]
    pub n_a: usize,
    /// Support radius (default 3x the generator's noise std).
    #[arg(long)]
    pub r_support: Option<f64>,
    /// Independent evaluation seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub eval_seeds: u64,
    /// LQ policy samples.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Comma-separated subset: lemma1, theorem2, marginal-consistency, lcb-algebra, finite-differences.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Matched draws for the guidance-equivalence check.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Drop the noise-scale factor from the guidance target (the equivalence check must then fail).
    #[arg(long)]
    pub mutate_noise_scale: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// One checkpoint per panel.
    #[arg(long, required = true, num_args = 1..)]
    pub ckpt: Vec<PathBuf>,
    /// Panel titles (default: each run's guidance mode).
    #[arg(long, num_args = 1..)]
    pub title: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output file stem inside --out-dir.
    #[arg(long, default_value = "figure")]
    pub name: String,
    #[arg(long)]
    pub csv_only: bool,
    #[arg(long, default_value_t = 41)]
    pub grid: usize,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub n_a: usize,
    #[arg(long, default_value_t = 8)]
    pub levels: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset file (default: a fresh 400-point ring bandit).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50,100")]
    pub t_list: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = dac_core::diffusion::VP_BETA_MIN)]
    pub beta_min: f64,
    #[arg(long, default_value_t = dac_core::diffusion::VP_BETA_MAX)]
    pub beta_max: f64,
    #[arg(long)]
    pub json: bool,
}

/// Bad invocation or inputs that disagree with each other (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<DacError>() {
            if matches!(e, DacError::Validation(_) | DacError::Toml(_)) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
