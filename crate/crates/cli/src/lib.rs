//! Command-line driver for `mcseg`.
//!
//! Every subcommand is a thin wrapper over `mcseg-core`; the functions here
//! are public so that tests and other tools can call them in-process.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mcseg_core::{Error, Result, Split};
use serde::de::DeserializeOwned;

pub mod benchmark;
pub mod commands;
pub mod render;
pub mod run_manifest;

pub use benchmark::{BenchmarkConfig, SeedResult, Table, TableRow, Variant};
pub use run_manifest::RunManifest;

/// Environment variable capping the worker threads of data-parallel stages.
pub const THREADS_ENV: &str = "MCSEG_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SEMANTIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mcseg", version, about = "Multichannel segmentation with domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired source/target dataset.
    Datagen(DatagenArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Write qualitative triptychs for selected samples.
    Render(RenderArgs),
    /// Train and score a matrix of variants over shared seeds.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset root; overrides `data_dir` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub source_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; the epoch with the lowest target entropy is scored.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "target_test")]
    pub split: Split,
    /// Refine the segmentation with the model's boundary output.
    #[arg(long)]
    pub refine: bool,
    #[arg(long, requires = "refine")]
    pub boundary_threshold: Option<f32>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated sample ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => EXIT_IO,
        Error::Semantic(_) | Error::Contract(_) => EXIT_SEMANTIC,
    }
}

/// Reads a JSON config. Parse failures are configuration errors whose
/// message carries the line and column.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Thread count from [`THREADS_ENV`]; `None` lets rayon decide.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn execute(command: Command) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads_from_env()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Datagen(a) => commands::datagen(&a).map(drop),
        Command::Train(a) => commands::train(&a).map(drop),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::Render(a) => commands::render(&a).map(drop),
        Command::Benchmark(a) => commands::benchmark(&a).map(drop),
    })
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
