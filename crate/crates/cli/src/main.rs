use std::path::PathBuf;
use std::process::ExitCode;

use bandrest_core::data::{CorpusLayout, DegradeMethod};
use bandrest_core::Error;
use clap::{Args, Parser, Subcommand};

mod commands;

/// Restore codec-degraded music with a band-split spectrogram model.
#[derive(Debug, Parser)]
#[command(name = "bandrest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Restore a WAV file with a trained checkpoint.
    Restore(RestoreArgs),
    /// Train a model on a stem manifest.
    Train(TrainArgs),
    /// Score restoration per bitrate and write JSON and CSV reports.
    Evaluate(EvaluateArgs),
    /// Apply codec-style degradation to a WAV file.
    Degrade(DegradeArgs),
    /// Measure parameter count and real-time factor.
    Bench(BenchArgs),
    /// Scan a stem corpus into a manifest.
    BuildManifest(ManifestArgs),
}

#[derive(Debug, Args)]
struct RestoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Checkpoint directory (e.g. `run/checkpoints/best`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Process incrementally in chunks (causal checkpoints only).
    #[arg(long)]
    streaming: bool,
    #[arg(long, default_value_t = 10)]
    chunk_ms: u32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Training stem manifest.
    #[arg(long)]
    data: PathBuf,
    /// Held-out stem manifest for validation (defaults to the training set).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Output directory of a new run.
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    run_dir: Option<PathBuf>,
    /// Continue the run stored in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "passthrough")]
    checkpoint: Option<PathBuf>,
    /// Score the degraded input itself instead of a model output.
    #[arg(long, conflicts_with = "checkpoint")]
    passthrough: bool,
    /// JSON list of `{degraded, target, bitrate?}` objects.
    #[arg(long, required_unless_present = "clean", conflicts_with = "clean")]
    pairs: Option<PathBuf>,
    /// Clean WAV files or directories to degrade on the fly.
    #[arg(long, num_args = 1..)]
    clean: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = bandrest_core::data::DEFAULT_BITRATES)]
    bitrates: Vec<u32>,
    #[arg(long, default_value = "surrogate")]
    method: DegradeMethod,
    #[arg(long)]
    codec_command: Option<String>,
    /// Directory for report.json, rows.csv and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Bits per second, e.g. 24000.
    #[arg(long)]
    bitrate: u32,
    #[arg(long, default_value = "surrogate")]
    method: DegradeMethod,
    /// Shell template with {in}, {out}, {bitrate} and {kbps}.
    #[arg(long)]
    codec_command: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    codec_timeout_s: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Benchmark a freshly initialized model of this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_seconds: f64,
    /// Time the chunked streaming path instead of the offline one.
    #[arg(long)]
    streaming: bool,
    #[arg(long, default_value_t = 10)]
    chunk_ms: u32,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ManifestArgs {
    #[arg(long)]
    root: PathBuf,
    /// musdb or moisesdb
    #[arg(long)]
    layout: CorpusLayout,
    #[arg(long)]
    output: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::InvalidStft(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Restore(a) => commands::restore(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::Bench(a) => commands::bench(a),
        Command::BuildManifest(a) => commands::build_manifest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
