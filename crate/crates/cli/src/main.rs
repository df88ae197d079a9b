//! `nestgen`: fit, sample, evaluate and inspect nested-data generators.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nestgen::data::Format;

#[derive(Parser, Debug)]
#[command(name = "nestgen", version, about = "Synthesize nested tabular data with composite autoregressive codecs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a dataset and write the model file.
    Fit(FitArgs),
    /// Draw synthetic records from a trained model.
    Sample(SampleArgs),
    /// Compare a synthetic dataset against the real one.
    Eval(EvalArgs),
    /// Print a model's schema, codec tree and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Data format; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<Format>,
    /// JSONL run log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long = "init-std", default_value_t = 0.02)]
    pub init_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train with per-example clipping and Gaussian noise.
    #[arg(long)]
    pub dp: bool,
    /// Per-example clipping threshold C.
    #[arg(long, default_value_t = 1e-3)]
    pub clip: f64,
    /// Noise multiplier σ.
    #[arg(long, default_value_t = 1.08)]
    pub noise: f64,
    #[arg(long = "shuffle-passes", default_value_t = 1)]
    pub shuffle_passes: usize,
    /// Learned positional embeddings for list items.
    #[arg(long)]
    pub positional: bool,
    /// Keep the root conditioning vector fixed at zero.
    #[arg(long = "fixed-c0")]
    pub fixed_c0: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub schema: PathBuf,
    /// The real dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// The synthetic dataset.
    #[arg(long)]
    pub synth: PathBuf,
    /// JSON report to write; the text report goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    /// Metric families to compute.
    #[arg(long, value_delimiter = ',', default_value = "distances,correlation,marginal")]
    pub metrics: Vec<Family>,
    #[arg(long, default_value_t = nestgen::metrics::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = nestgen::metrics::DEFAULT_SUBSETS)]
    pub subsets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Consistency rules file (JSON).
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Also write a seeded 80/20 train/test split of the real data here.
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Distances,
    Correlation,
    Marginal,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NESTGEN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
