//! `ccbym2`: fit, predict, diagnose, simulate and graph utilities.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 convergence gate failure.

mod config;
mod diagnose;
mod fit;
mod graph;
mod manifest;
mod predict;
mod simulate;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "CCBYM2_THREADS";

#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Gate(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Gate(_) => 3,
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Tags an error with its exit class.
pub trait Classify<T> {
    fn config(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccbym2", version, about = "Contaminated case-control logit with BYM2 area effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model and write draws, summaries, diagnostics and a manifest.
    Fit(FitArgs),
    /// Rank covariate profiles using the draws of an earlier fit.
    Predict(PredictArgs),
    /// Recompute convergence diagnostics for a directory of draw files.
    Diagnose(DiagnoseArgs),
    /// Run the simulation study.
    Simulate(SimulateArgs),
    /// Adjacency graph utilities.
    #[command(subcommand)]
    Graph(GraphCommand),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Total iterations per chain, warmup included.
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Report a failing gate without exiting with code 3.
    #[arg(long)]
    pub no_gate: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `fit`.
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Directory holding `chain_<k>.csv` files.
    #[arg(long)]
    pub draws: PathBuf,
    /// Where to write `diagnostics.csv`; printed only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.05)]
    pub fail_rhat: f64,
    #[arg(long, default_value_t = 1.01)]
    pub warn_rhat: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_sims: Option<usize>,
    /// Re-run only this simulation index and print its rows.
    #[arg(long)]
    pub replay: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GraphSource {
    /// `idA,idB` edge list.
    #[arg(long, conflicts_with = "lattice", required_unless_present = "lattice")]
    pub graph: Option<PathBuf>,
    /// Node order file, one id per line.
    #[arg(long, requires = "graph")]
    pub roster: Option<PathBuf>,
    /// Lattice as `ROWSxCOLS`.
    #[arg(long)]
    pub lattice: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// Report nodes, edges and connected components.
    Check(GraphSource),
    /// Print the BYM2 scaling factor.
    Scale(GraphSource),
    /// Moran's I of per-area values with a permutation test.
    Moran(MoranArgs),
}

#[derive(Debug, Args)]
pub struct MoranArgs {
    #[command(flatten)]
    pub source: GraphSource,
    /// CSV whose first column holds area ids, e.g. `residuals.csv` of a fit.
    #[arg(long)]
    pub values: PathBuf,
    /// Value column; the second column when omitted.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long, default_value_t = 999)]
    pub permutations: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Fit(a) => fit::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Diagnose(a) => diagnose::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Graph(g) => graph::run(g),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Gate(msg) => eprintln!("convergence gate failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
