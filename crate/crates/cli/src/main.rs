//! `nmfhmm`: train NMF-HMM source models, enhance noisy recordings,
//! score the results and sweep model sizes.

mod commands;
mod manifest;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmfhmm::{SourceRole, StftConfig};

#[derive(Parser, Debug)]
#[command(name = "nmfhmm", version, about = "NMF-HMM speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a speech or noise model from WAV files.
    Train(TrainArgs),
    /// Enhance a noisy WAV with a speech and a noise model.
    Enhance(EnhanceArgs),
    /// Score a processed WAV against its clean reference.
    Eval(EvalArgs),
    /// Train and evaluate a grid of model sizes.
    Sweep(SweepArgs),
    /// Print a summary of a model file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
struct StftArgs {
    #[arg(long, default_value_t = 1024)]
    frame_len: usize,
    #[arg(long, default_value_t = 512)]
    hop: usize,
}

impl StftArgs {
    fn config(&self) -> anyhow::Result<StftConfig> {
        Ok(StftConfig::new(self.frame_len, self.hop)?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Which source the model describes; selects the matching size flags.
    #[arg(long)]
    role: SourceRole,
    /// WAV files to train on.
    inputs: Vec<PathBuf>,
    /// Manifest files listing further WAV inputs.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Log-likelihood trace; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    states_speech: usize,
    #[arg(long, default_value_t = 2)]
    states_noise: usize,
    #[arg(long, default_value_t = 25)]
    basis_speech: usize,
    #[arg(long, default_value_t = 70)]
    basis_noise: usize,
    #[arg(long, default_value_t = 30)]
    train_iters: usize,
    /// Stop once the relative log-likelihood change falls below this.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    stft: StftArgs,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Noisy 16 kHz WAV.
    input: PathBuf,
    #[arg(long)]
    speech_model: PathBuf,
    #[arg(long)]
    noise_model: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    enhance_iters: usize,
    /// Lower bound on the per-bin gain.
    #[arg(long, default_value_t = 0.0)]
    min_gain: f64,
    /// Write the frames × bins gain matrix as CSV.
    #[arg(long)]
    gain_dump: Option<PathBuf>,
    /// Accepted for symmetry with `train`; enhancement draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    stft: StftArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// `key=value` score files (for example PESQ or STOI from other tools)
    /// merged into the report.
    #[arg(long = "external")]
    external: Vec<PathBuf>,
    /// Emit a header and one comma-separated row instead of key=value lines.
    #[arg(long)]
    csv: bool,
    /// Write per-frame segmental SNR values, one per line.
    #[arg(long)]
    per_frame: Option<PathBuf>,
    #[command(flatten)]
    stft: StftArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated speech state counts.
    #[arg(long, value_delimiter = ',', default_value = "40")]
    states_speech: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    states_noise: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "25")]
    basis_speech: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "70")]
    basis_noise: Vec<usize>,
    #[arg(long)]
    speech_train: PathBuf,
    #[arg(long)]
    noise_train: PathBuf,
    /// Clean references, paired line by line with `--test-noisy`.
    #[arg(long)]
    test_clean: PathBuf,
    #[arg(long)]
    test_noisy: PathBuf,
    /// Results table; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    train_iters: usize,
    #[arg(long, default_value_t = 15)]
    enhance_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    stft: StftArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
