//! `vessel`: data generation, training, studies, evaluation and tracer
//! simulation for the stirred-vessel flow surrogate.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Invalid invocation or configuration (exit status 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Debug, Parser)]
#[command(
    name = "vessel",
    version,
    about = "Physics-informed flow surrogates for a stirred vessel"
)]
pub struct Cli {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "VESSEL_WORKERS")]
    pub workers: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a manufactured-solution dataset.
    GenData(GenDataArgs),
    /// Train one surrogate.
    Train(TrainArgs),
    /// Train-size × seed × variant data-efficiency study.
    Study(StudyArgs),
    /// Test-set and residual errors of a trained model.
    Eval(EvalArgs),
    /// Axial profiles of a trained model against the reference.
    Profiles(ProfilesArgs),
    /// Frozen-flow tracer simulation.
    Tracer(TracerArgs),
    /// Learning curves and tracer ensembles from a finished study.
    Report(ReportArgs),
    /// Re-hash the inputs and artifacts listed in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub conditions: Option<usize>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file holding the manufactured-solution constants.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated training condition indices.
    #[arg(long, value_delimiter = ',', conflicts_with = "train_size")]
    pub train_conditions: Option<Vec<usize>>,
    /// Draw this many training conditions with `--split-seed`.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub variant: Option<vessel::objective::Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<vessel::objective::Variant>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Condition indices to evaluate (default: all).
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfilesArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reference data; without it the exact manufactured fields are used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub rpm: f64,
    #[arg(long)]
    pub height: f64,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub z_min: f64,
    /// Upper end of the line (default: the liquid height).
    #[arg(long)]
    pub z_max: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TracerArgs {
    #[arg(long, conflicts_with = "exact")]
    pub model: Option<PathBuf>,
    /// Use the exact manufactured flow instead of a model.
    #[arg(long)]
    pub exact: bool,
    #[arg(long)]
    pub rpm: f64,
    #[arg(long)]
    pub height: f64,
    /// Cells as n_r,n_theta,n_z.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub scheme: Option<vessel::tracer::Scheme>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a finished `study`.
    #[arg(long)]
    pub study: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out condition index for the tracer ensembles (default: the
    /// study's reserved condition).
    #[arg(long)]
    pub condition: Option<usize>,
    /// Train sizes whose models are run through the tracer.
    #[arg(long, value_delimiter = ',')]
    pub tracer_sizes: Option<Vec<usize>>,
    #[arg(long, default_value = "c-mlp")]
    pub tracer_variant: vessel::objective::Variant,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Directory containing `manifest.json`.
    pub dir: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<vessel::Error>() {
        Some(vessel::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    if err.downcast_ref::<Usage>().is_some() {
        return "usage";
    }
    err.chain()
        .find_map(|e| e.downcast_ref::<vessel::Error>())
        .map(|e| e.category())
        .unwrap_or("runtime")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
