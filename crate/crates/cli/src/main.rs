//! `markovdt`: Markov-head analysis and decision-transformer experiments.
//!
//! Exit status: 0 success, 2 usage error, 3 validation failure (bad input or
//! a failed verification), 4 runtime error.

mod commands;
mod config;
mod exit;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "markovdt", version, about = "Markov attention heads in decision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Report diagonal and diagonal/off-diagonal ratio statistics for every attention head in an archive.
    Analyze(AnalyzeArgs),
    /// Numerical checks of the Markov-head theory.
    Verify {
        #[command(subcommand)]
        check: VerifyCommand,
    },
    /// Write synthetic Markov query/key pairs to an archive.
    SynthHeads(SynthHeadsArgs),
    /// Collect an offline dataset with a behaviour policy.
    GenData(GenDataArgs),
    /// Train a policy from an experiment config.
    Train(TrainArgs),
    /// Roll out a checkpoint and report returns, lengths and gate mass.
    Eval(CheckpointArgs),
    /// Score every head by zero ablation on evaluation windows.
    AblateHeads(CheckpointArgs),
    /// Train and evaluate one model per context length and seed.
    SweepContext(SweepArgs),
    /// Write attention, gate and query-key heatmaps for one evaluation window.
    ExportHeatmaps(HeatmapArgs),
}

#[derive(Debug, Subcommand)]
enum VerifyCommand {
    /// Monte-Carlo estimate of E[E A Eᵀ] for a synthetic Markov A.
    Theorem1(Theorem1Args),
    /// Step-count bound for keeping a Markov matrix Markov under bounded updates.
    Theorem4(Theorem4Args),
    /// Last-token attention mass of a Markov head against a shuffled control.
    Concentration(ConcentrationArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// MHW archive containing `layer{L}.head{H}.wq` / `.wk` tensors.
    #[arg(long)]
    weights: PathBuf,
    /// Markov threshold for the diagonal-to-off-diagonal ratio.
    #[arg(long, default_value_t = 20.0)]
    r: f64,
    /// Denominator guard added to the mean off-diagonal magnitude.
    #[arg(long, default_value_t = markovdt::markovlab::DEFAULT_EPS)]
    eps: f64,
    /// Restrict the report to one layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Accepted for uniformity; the analysis draws nothing at random.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out/analyze")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Theorem1Args {
    /// Embedding dimension of the synthetic Markov matrix.
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Markov threshold the matrix is built for and the estimate is judged at.
    #[arg(long, default_value_t = 20.0)]
    r: f64,
    /// Sequence length K of the sampled embeddings.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Monte-Carlo sample count.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Diagonal entries must lie within this many standard errors of trace(A).
    #[arg(long, default_value_t = 3.0)]
    sigmas: f64,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out/verify-theorem1")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Theorem4Args {
    /// Dimension of the synthetic Markov matrix.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Markov threshold.
    #[arg(long, default_value_t = 20.0)]
    r: f64,
    /// Learning-rate bound.
    #[arg(long, default_value_t = 1e-3)]
    eta0: f64,
    /// Gradient-magnitude bound B.
    #[arg(long, default_value_t = 1.0)]
    grad_bound: f64,
    /// Perturbation model: worst_case or random.
    #[arg(long, default_value = "worst_case")]
    mode: String,
    /// Simulate this many multiples of the bound.
    #[arg(long, default_value_t = 10)]
    factor: u64,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out/verify-theorem4")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConcentrationArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Query/key dimension; scores are divided by its square root.
    #[arg(long, default_value_t = 8)]
    d_k: usize,
    /// Markov threshold of the synthetic head.
    #[arg(long, default_value_t = 20.0)]
    r: f64,
    /// Sequence length.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Sampled embedding sequences.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Required ratio of head mass to control mass.
    #[arg(long, default_value_t = 2.0)]
    min_factor: f64,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out/verify-concentration")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthHeadsArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    /// Query/key dimension.
    #[arg(long, default_value_t = 4)]
    d_k: usize,
    /// Markov threshold every head must pass.
    #[arg(long, default_value_t = 20.0)]
    r: f64,
    /// Scale c of the product c · U Uᵀ.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Layer index used in the tensor names.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Comma-separated head indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    heads: Vec<usize>,
    /// Seed for every random draw; each head derives its own.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output archive.
    #[arg(long, default_value = "out/synthetic_heads.mhw")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// posture or maze.
    #[arg(long, default_value = "posture")]
    env: String,
    /// Maze side length (maze only).
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Maze layout seed (maze only).
    #[arg(long, default_value_t = 0)]
    layout_seed: u64,
    /// medium or mixture.
    #[arg(long, default_value = "medium")]
    quality: String,
    /// Number of episodes to collect.
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Seed for the behaviour policy and start states.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL file.
    #[arg(long, default_value = "out/dataset.jsonl")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment config (TOML); omitted means every default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Validate the config and write config.resolved.toml without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run record; defaults to run.json beside the checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Overrides the recorded evaluation episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Overrides the recorded evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the recorded context length.
    #[arg(long)]
    context_k: Option<usize>,
    /// Fixed initial return-to-go, overriding the recorded target.
    #[arg(long)]
    target_rtg: Option<f64>,
    /// Output directory; defaults to a folder beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Experiment config (TOML); omitted means every default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated ascending context lengths.
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    ks: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out/sweep")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Timestep of the episode whose query window is drawn; defaults to the last.
    #[arg(long)]
    step: Option<usize>,
    /// Pixels per matrix entry in the PGM images.
    #[arg(long, default_value_t = 8)]
    pixel_scale: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Analyze(a) => commands::analyze(&a),
        Command::Verify { check } => match check {
            VerifyCommand::Theorem1(a) => commands::verify_theorem1(&a),
            VerifyCommand::Theorem4(a) => commands::verify_theorem4(&a),
            VerifyCommand::Concentration(a) => commands::verify_concentration(&a),
        },
        Command::SynthHeads(a) => commands::synth_heads(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::AblateHeads(a) => commands::ablate_heads(&a),
        Command::SweepContext(a) => commands::sweep_context(&a),
        Command::ExportHeatmaps(a) => commands::export_heatmaps(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}
