mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "attn-adapter",
    version,
    about = "Few-shot cross-attention adapters over precomputed embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic embeddings archive.
    Synth(SynthArgs),
    /// Train both adapters and write a checkpoint.
    Train(TrainArgs),
    /// Score a method on one sampled episode and write metrics JSON.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random problems.
    Gradcheck(GradcheckArgs),
    /// Tabulate metrics files.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub n_classes: usize,
    /// Samples per class available for support sets.
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Query samples per class.
    #[arg(long, default_value_t = 50)]
    pub queries: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub locals: usize,
    /// Image feature noise scale.
    #[arg(long, default_value_t = attn_adapter::episodes::STANDARD_NOISE)]
    pub noise: f64,
    /// Category embedding noise scale; defaults to a fixed fraction of --noise.
    #[arg(long)]
    pub text_noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Base,
    Novel,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Weight of the anchor term.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Softmax temperature.
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Attention width; defaults to the embedding dim.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Reuse the first support set for every epoch.
    #[arg(long)]
    pub fixed_support: bool,
    /// Classes to train on.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history as JSON lines; defaults to `<out>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Attn,
    Tip,
    Zeroshot,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained adapters; without one, `attn` uses the untrained init for --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Attn)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cache-model residual weight. Without --alpha and --beta the pair is grid searched.
    #[arg(long, requires = "beta")]
    pub alpha: Option<f64>,
    /// Cache-model sharpness.
    #[arg(long, requires = "alpha")]
    pub beta: Option<f64>,
    /// Metrics JSON path; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 3)]
    pub shots: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub locals: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 6)]
    pub queries: usize,
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradient; the check must then fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Md,
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Metrics files; the first one is the baseline for the delta column.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(raw) = std::env::var("ATTN_ADAPTER_THREADS") {
        let n: usize = raw.parse().map_err(|_| {
            anyhow::anyhow!("ATTN_ADAPTER_THREADS must be a positive integer, got {raw:?}")
        })?;
        if n == 0 {
            anyhow::bail!("ATTN_ADAPTER_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a).map(|_| true),
        Command::Train(a) => commands::train(&a).map(|_| true),
        Command::Eval(a) => commands::eval(&a).map(|_| true),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Report(a) => report::report(&a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
