//! `sigood`: synthesize datasets, pretrain, detect, evaluate and benchmark.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::{DeserializeOwned, IntoDeserializer};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "sigood",
    version,
    about = "Test-time graph OOD detection with energy-preference prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it in TU format.
    Synth(SynthArgs),
    /// Pretrain the encoder and scoring head on a TU dataset.
    Train(TrainArgs),
    /// Score every graph of a TU dataset with a pretrained checkpoint.
    Detect(DetectArgs),
    /// Compute the AUC of a scores file.
    Eval(EvalArgs),
    /// Run the benchmark (and sweeps) described by a config file.
    Bench(BenchArgs),
    /// Run the gradient and reward-derivation self-checks.
    Verify(VerifyArgs),
}

/// Parses a kebab-case enum value through its serde representation.
pub(crate) fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    let de: serde::de::value::StrDeserializer<'_, serde::de::value::Error> = s.into_deserializer();
    T::deserialize(de).map_err(|e| e.to_string())
}

fn comma_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

fn seed_list(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<u64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset name (file prefix); defaults to `<family>-<seed>`.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_parser = kebab::<sigood_core::data::Family>)]
    family: Option<sigood_core::data::Family>,
    #[arg(long)]
    n_graphs: Option<usize>,
    #[arg(long)]
    nodes_min: Option<usize>,
    #[arg(long)]
    nodes_max: Option<usize>,
    #[arg(long)]
    edge_prob: Option<f64>,
    /// Comma-separated per-dimension means, e.g. `0,0,0,0`. (The full path
    /// keeps clap from treating this as a repeated argument.)
    #[arg(long, value_parser = comma_list)]
    feature_mean: Option<::std::vec::Vec<f64>>,
    #[arg(long)]
    feature_std: Option<f64>,
    #[arg(long, value_parser = kebab::<sigood_core::data::Motif>)]
    motif: Option<sigood_core::data::Motif>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the TU files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// TU dataset name (file prefix).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    /// Where to write the checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Optional per-epoch statistics CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DetectorFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = kebab::<sigood_core::detector::Mode>)]
    mode: Option<sigood_core::detector::Mode>,
    #[arg(long)]
    pg_depth: Option<u8>,
    /// Decision threshold: score ≥ tau is OOD.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = kebab::<sigood_core::detector::Ablation>)]
    ablation: Option<sigood_core::detector::Ablation>,
    #[arg(long, value_parser = kebab::<sigood_core::detector::ScoreSign>)]
    score_sign: Option<sigood_core::detector::ScoreSign>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for scores.csv, trace.csv, distribution.csv and
    /// config.toml.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// CSV with `graph_id,score` and optionally `label` columns.
    #[arg(long)]
    scores: PathBuf,
    /// CSV with `graph_id,label`, needed when the scores file has no labels.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// TOML run configuration with a `[benchmark]` section.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config, e.g. `0,1,2`.
    #[arg(long, value_parser = seed_list)]
    seeds: Option<::std::vec::Vec<u64>>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Random instances per gradient check and derivation test.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Detect(a) => commands::detect(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Verify(a) => commands::verify(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Help and version exit 0, usage errors exit 2.
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
