//! `mita`: self-checks, throughput benchmarks, training runs, m-k sweeps and
//! diagnostics for MiTA attention.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage error, 3 runtime error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mita", version, about = "MiTA attention: checks, benchmarks, training and diagnostics")]
struct Cli {
    /// Worker threads (defaults to MITA_THREADS, then the number of CPUs).
    #[arg(long, global = true, env = "MITA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence, invariant and gradient suites.
    Check(CheckArgs),
    /// Measure forward throughput of a small transformer.
    Bench(BenchArgs),
    /// Train a model on a synthetic task.
    Train(TrainArgs),
    /// Evaluate a trained model over a grid of (m, k).
    Sweep(SweepArgs),
    /// Expert coverage, expert/query overlap and cross-mechanism accuracy.
    Diag(DiagArgs),
}

#[derive(Args, Serialize)]
pub struct CheckArgs {
    /// Only run suites whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only run the gradient suites and print their report.
    #[arg(long)]
    pub grad: bool,
    /// Write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    /// Comma-separated mechanisms: full, mita, compress, route.
    #[arg(long, default_value = "full,mita")]
    pub mech: String,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seq_len: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    /// Stop growing the batch once a forward pass takes longer than this.
    #[arg(long, default_value_t = 1500)]
    pub budget_ms: u64,
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "full")]
    pub mech: String,
    /// recall or copy.
    #[arg(long, default_value = "recall")]
    pub task: String,
    /// Sequence length.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    /// Probe positions per sequence (recall: N - vocab, copy: N / 4).
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables it.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
    #[arg(long, default_value_t = commands::EVAL_SEED)]
    pub eval_seed: u64,
    /// Output directory for params.bin, history.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Cells as "m1xk1,m2xk2,...".
    #[arg(long)]
    pub grid: String,
    /// Reference cell "MxK"; defaults to the (m, k) the model was trained with.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = commands::EVAL_SEED)]
    pub eval_seed: u64,
    #[arg(long)]
    pub json: PathBuf,
    /// Also write the grid as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct DiagArgs {
    /// Model files; repeat for several models.
    #[arg(long, required = true)]
    pub params: Vec<PathBuf>,
    /// Per-layer fraction of positions kept by any expert.
    #[arg(long)]
    pub coverage: bool,
    /// Per-layer IoU between expert keys and routed queries.
    #[arg(long)]
    pub overlap: bool,
    /// Comma-separated inference mechanisms for the cross-mechanism matrix.
    #[arg(long)]
    pub cross: Option<String>,
    /// Override m (defaults to the trained value, else 16).
    #[arg(long)]
    pub m: Option<usize>,
    /// Override k (defaults to the trained value, else 16).
    #[arg(long)]
    pub k: Option<usize>,
    /// Sequences averaged by --coverage and --overlap.
    #[arg(long, default_value_t = 16)]
    pub sequences: usize,
    #[arg(long, default_value_t = commands::EVAL_SEED)]
    pub eval_seed: u64,
    #[arg(long)]
    pub json: PathBuf,
}

pub enum Failure {
    Usage(String),
    Check(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<mita_core::MitaError> for Failure {
    fn from(e: mita_core::MitaError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match &cli.command {
        Command::Check(a) => commands::check(a),
        Command::Bench(a) => commands::bench(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Diag(a) => commands::diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
