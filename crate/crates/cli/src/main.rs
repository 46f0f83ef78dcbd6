use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Face anti-spoofing with an LDCformer: data generation, training,
/// evaluation and diagnostics.
#[derive(Debug, Parser)]
#[command(name = "ldcformer", version)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log verbosity: -v for info, -vv for debug. RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-domain dataset of PNG images and a manifest.
    GenData(GenDataArgs),
    /// Train all networks jointly and write checkpoints.
    Train(TrainArgs),
    /// Score a protocol's test samples and write metric reports.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive, layer and loss.
    GradCheck(GradCheckArgs),
    /// Dump self-challenging pairs, masks and attention maps as PNG.
    MixPreview(MixPreviewArgs),
    /// Write pooled final-layer features, one sample per line.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub domains: Vec<String>,
    /// Live images per domain; the same number of spoofs is written.
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Output directory; receives one folder per domain and manifest.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings that override values from the config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// TOML run configuration (train, data, protocol sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed for initialization, batching and mixing.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `all`, `cross:<domain>` or `intra:<domain>[,<domain>...]`.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Held-out share per (domain, class) for intra protocols.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// HTER threshold rule: `eer`, `min-hter` or a number.
    #[arg(long)]
    pub threshold: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Passes over the training samples; replaces --steps.
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of the LDCformer and estimators.
    #[arg(long)]
    pub lr_main: Option<f64>,
    /// Learning rate of the auxiliary CAM network.
    #[arg(long)]
    pub lr_aux: Option<f64>,
    /// Weight of the dual-attention loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight of the self-challenging loss.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the transitional triplet loss.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Disable self-challenging samples.
    #[arg(long)]
    pub no_mix: bool,
    /// Liveness loss only: zero auxiliary weights and no mixing.
    #[arg(long)]
    pub liveness_only: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write `step_<n>.ckpt` every this many steps (0 = never).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report directory; defaults to `eval/` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seeded points per check.
    #[arg(long, default_value_t = ldcformer::gradsuite::DEFAULT_POINTS)]
    pub points: usize,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = ldcformer::gradsuite::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Only run checks whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
    /// Also write the results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixPreviewArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Use the auxiliary network of this checkpoint instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of pairs to dump.
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential {
        ldcformer::Exec::Sequential
    } else {
        ldcformer::Exec::default()
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, exec),
        Command::Train(a) => commands::train(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::GradCheck(a) => commands::grad_check(a, exec),
        Command::MixPreview(a) => commands::mix_preview(a, exec),
        Command::ExportFeatures(a) => commands::export_features(a, exec),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let text = e.to_string();
            let line: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("error: {}", line.join(" "));
            match e {
                ldcformer::Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
