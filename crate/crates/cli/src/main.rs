//! `stein-encoder` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage, configuration or
//! input error.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stein_encoder::experiments::{CohortShape, Model, Setting};
use stein_encoder::Error;

use commands::{BenchmarkOpts, FitOpts, PredictOpts, RegimeArg, SimulateOpts, TrainOpts};
use config::{FileConfig, RunConfig};

/// Usage, configuration or input problem detected by the front end.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "stein-encoder", version, about = "Supervised linear encoders via residual Stein moments")]
struct Cli {
    /// Seed for the pipeline, the networks and the simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "STEIN_ENCODER_THREADS")]
    threads: Option<usize>,
    /// TOML file with optional `seed`, `threads`, `[pipeline]`, `[mlp]` and `[sim]` entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the simulation study and write per-replication results.
    Simulate(SimulateArgs),
    /// Fit an encoder on a data file.
    Fit(FitArgs),
    /// Apply a fitted encoder to a data file, writing one `t_hat` per row.
    Encode(EncodeArgs),
    /// Train a prediction network, on raw features or with an encoder.
    Train(TrainArgs),
    /// Predict with a trained network.
    Predict(PredictArgs),
    /// Cross-validated comparison of raw, encoder and first-PC inputs.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic clinical + copy-number + expression cohort.
    Cohort(CohortArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// I, II or III.
    #[arg(long)]
    model: Option<Model>,
    /// indep or corr.
    #[arg(long)]
    setting: Option<Setting>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    /// Run all twelve model / setting / size configurations.
    #[arg(long)]
    grid: bool,
    /// Training and test size of the high-dimensional grid rows.
    #[arg(long)]
    high_dim_n: Option<usize>,
    /// Only measure direction recovery.
    #[arg(long)]
    no_mlp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Keep only the K highest-variance feature columns.
    #[arg(long, value_name = "K")]
    top_genes: Option<usize>,
    #[arg(long, value_enum)]
    regime: Option<RegimeArg>,
    /// Also write `plot_data.csv` with y, t_hat and the first principal component.
    #[arg(long)]
    emit_plot_data: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// `encoder.json` written by `fit`.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Train on `[X, t_hat]` with the residual safeguard instead of `[X, Z]`.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, value_name = "K")]
    top_genes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "t_hat")]
    encoder: Option<PathBuf>,
    /// Precomputed `t_hat` column, as written by `encode`.
    #[arg(long)]
    t_hat: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_name = "K")]
    top_genes: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CohortArgs {
    #[arg(long, default_value_t = 1900)]
    n: usize,
    /// Nuisance columns, six clinical plus copy number.
    #[arg(long, default_value_t = 400)]
    p: usize,
    #[arg(long, default_value_t = 500)]
    q: usize,
    #[arg(long, default_value_t = 10)]
    signal_genes: usize,
    #[arg(long, default_value_t = 1.5)]
    snr: f64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::Singular(_)
            | Error::NotPositiveDefinite(_)
            | Error::EigenNotConverged { .. }
            | Error::Degenerate(_)
            | Error::Diverged { .. },
        ) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = match cli.threads.or(file.threads) {
        Some(0) => return Err(UsageError("--threads must be positive".into()).into()),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| UsageError(format!("thread pool: {e}")))?;
    let resolve = |name: &str| {
        let mut r = RunConfig::resolve(name, &file, cli.seed, threads);
        if let Some(p) = &cli.config {
            r.input("config", p);
        }
        r
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(
            resolve("simulate"),
            file.sim.clone(),
            &SimulateOpts {
                model: a.model,
                setting: a.setting,
                p: a.p,
                q: a.q,
                n_train: a.n_train,
                n_test: a.n_test,
                reps: a.reps,
                snr: a.snr,
                grid: a.grid,
                high_dim_n: a.high_dim_n,
                no_mlp: a.no_mlp,
                out: a.out,
            },
        ),
        Command::Fit(a) => commands::fit_cmd(
            resolve("fit"),
            &FitOpts {
                data: a.data,
                manifest: a.manifest,
                top_genes: a.top_genes,
                regime: a.regime,
                emit_plot_data: a.emit_plot_data,
                out: a.out,
            },
        ),
        Command::Encode(a) => commands::encode_cmd(&a.encoder, &a.data, &a.out),
        Command::Train(a) => commands::train_cmd(
            resolve("train"),
            &TrainOpts { data: a.data, manifest: a.manifest, encoder: a.encoder, top_genes: a.top_genes, out: a.out },
        ),
        Command::Predict(a) => commands::predict_cmd(&PredictOpts {
            model: a.model,
            data: a.data,
            encoder: a.encoder,
            t_hat: a.t_hat,
            out: a.out,
        }),
        Command::Benchmark(a) => commands::benchmark_cmd(
            resolve("benchmark"),
            &BenchmarkOpts { data: a.data, manifest: a.manifest, top_genes: a.top_genes, folds: a.folds, out: a.out },
        ),
        Command::Cohort(a) => {
            let seed = cli.seed.or(file.seed).unwrap_or(CohortShape::default().seed);
            let shape = CohortShape { n: a.n, p: a.p, q: a.q, signal_genes: a.signal_genes, snr: a.snr, seed };
            commands::cohort_cmd(&shape, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
