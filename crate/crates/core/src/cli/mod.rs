//! Command-line front end: `train`, `solve`, `bench`, `verify`.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors (nothing
//! is written), 1 for runtime failures.

pub mod config;
pub mod csv_io;
pub mod manifest;

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cgfac", version, about = "Matrix-free K-FAC natural gradient with conjugate gradient")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an MLP and write train_log.csv and manifest.txt.
    Train(Box<TrainArgs>),
    /// Solve one random damped Kronecker block by CG and by the direct inverse.
    Solve(SolveArgs),
    /// Measure flops, peak memory and wall time per solve path.
    Bench(BenchArgs),
    /// Run the built-in oracle checks.
    Verify(VerifyArgs),
}

/// Every option is optional here so a `--config` file can fill the gaps;
/// flags take precedence over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// `key = value` file; keys are the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sgd, kfac_direct or cgfac.
    #[arg(long)]
    pub method: Option<String>,
    /// blobs or idx.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub blobs_per_class: Option<usize>,
    #[arg(long)]
    pub blobs_dim: Option<usize>,
    #[arg(long)]
    pub blobs_classes: Option<usize>,
    #[arg(long)]
    pub blobs_spread: Option<f64>,
    /// Hidden widths, comma separated (e.g. `8` or `32,16`).
    #[arg(long)]
    pub hidden: Option<String>,
    /// tanh, relu or identity.
    #[arg(long)]
    pub activation: Option<String>,
    /// cross_entropy or mse.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Falls back to the config file, then CGFAC_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cg_max_iters: Option<usize>,
    #[arg(long)]
    pub cg_rel_tol: Option<f64>,
    #[arg(long)]
    pub cg_abs_tol: Option<f64>,
    #[arg(long)]
    pub no_warm_start: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[arg(long, default_value_t = 6)]
    pub n_a: usize,
    #[arg(long, default_value_t = 5)]
    pub n_g: usize,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub gamma: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// cg or direct: which solution is reported as primary.
    #[arg(long, default_value = "cg")]
    pub method: String,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-14)]
    pub abs_tol: f64,
    /// Where to write the `k,rho` trace.
    #[arg(long, default_value = "cg_trace.csv")]
    pub trace: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// n_A = n_G values, comma separated.
    #[arg(long, default_value = "8,16,32,64")]
    pub sizes: String,
    #[arg(long, default_value = "1,4")]
    pub batches: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also time the eigendecomposition path.
    #[arg(long)]
    pub with_direct: bool,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Seed from the environment, used when neither a flag nor a config file
/// supplies one.
pub(crate) fn env_seed() -> crate::Result<Option<u64>> {
    match std::env::var("CGFAC_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("CGFAC_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
