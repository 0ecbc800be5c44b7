//! `warpfactor`: register curves, simulate benchmark data and score
//! registrations from the command line.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on usage errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "warpfactor", version, about = "Bayesian curve registration with a two-factor model")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model to a function file and write the registration.
    Register(RegisterArgs),
    /// Generate one of the simulated benchmark datasets.
    Simulate(SimulateArgs),
    /// Score a registration against the original curves.
    Evaluate(EvaluateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Avb,
    Mcmc,
    #[value(name = "avb+mcmc")]
    AvbMcmc,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Avb => "avb",
            Engine::Mcmc => "mcmc",
            Engine::AvbMcmc => "avb+mcmc",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupModeArg {
    /// Quadrant of the centred weights.
    Quadrant,
    /// Quadrant of centred z1 and raw z2.
    QuadrantZ1,
    /// Three groups split by z2 at `--z2-lo` and `--z2-hi`.
    Z2Threshold,
}

#[derive(clap::Args, Debug)]
pub struct RegisterArgs {
    /// Function file: header `t,name1,...`, one row per time point.
    #[arg(long)]
    pub input: PathBuf,
    /// Model configuration JSON (keys as in ModelConfig; missing keys take defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "avb")]
    pub engine: Engine,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// MCMC iterations.
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Keep every `thin`-th MCMC draw.
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Maximum AVB iterations.
    #[arg(long, default_value_t = 500)]
    pub avb_iters: usize,
    #[arg(long, value_enum, default_value = "quadrant")]
    pub group_mode: GroupModeArg,
    #[arg(long, default_value_t = -0.1, allow_negative_numbers = true)]
    pub z2_lo: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub z2_hi: f64,
}

#[derive(clap::Args, Debug)]
pub struct SimulateArgs {
    /// Which benchmark: 1 or 2.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub set: u8,
    #[arg(long, default_value_t = 61)]
    pub p: usize,
    /// Number of functions (set 2 only; set 1 always has 21).
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub registered: PathBuf,
    /// Groups file (a `label` column, one row per function).
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Truth sidecar written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Estimated factors (`t,f1,f2`); defaults to factors.csv beside `--registered`.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Register(a) => commands::register(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
