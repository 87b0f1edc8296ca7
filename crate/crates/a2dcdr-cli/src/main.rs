//! Command-line pipeline: dataset preparation, training, evaluation,
//! ablation sweeps, and gradient checking.
//!
//! Exit codes: 0 on success, 1 for validation/usage errors, 2 for runtime
//! or numerical failures.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use a2dcdr::data::Domain;
use a2dcdr::training::Ablation;

#[derive(Parser)]
#[command(name = "a2dcdr", version, about = "Cross-domain recommendation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Suppress console tables and progress lines.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest interaction logs or synthesize a dataset, build evaluation
    /// candidate sets, and write everything under --out.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared dataset.
    Eval(EvalArgs),
    /// Train all four ablation variants with a shared seed and emit a
    /// comparison table.
    Ablate(AblateArgs),
    /// Verify every loss term's gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Domain-A interaction file (user, item[, timestamp] per line).
    #[arg(long, requires = "input_b", conflicts_with = "synthetic")]
    input_a: Option<PathBuf>,
    /// Domain-B interaction file.
    #[arg(long, requires = "input_a", conflicts_with = "synthetic")]
    input_b: Option<PathBuf>,
    /// Explicit domain-A test split (overrides leave-one-out).
    #[arg(long, requires = "test_b")]
    test_a: Option<PathBuf>,
    /// Explicit domain-B test split.
    #[arg(long, requires = "test_a")]
    test_b: Option<PathBuf>,
    /// Column delimiter for interaction files.
    #[arg(long, default_value = "\t")]
    delimiter: char,

    /// Generate a synthetic cross-domain dataset instead of ingesting.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items_a: usize,
    #[arg(long, default_value_t = 200)]
    items_b: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    /// Shared-preference strength in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    shared: f64,
    /// Source-exclusive signal strength in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    exclusive: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    interactions_per_user: usize,

    /// Sampled negatives per evaluation candidate set.
    #[arg(long, default_value_t = 999)]
    negatives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the dataset and candidate sets.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// JSON config file mirroring the training-config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta_a: Option<f64>,
    #[arg(long)]
    beta_b: Option<f64>,
    #[arg(long)]
    gamma_a: Option<f64>,
    #[arg(long)]
    gamma_b: Option<f64>,
    #[arg(long)]
    club_inner_steps: Option<usize>,
    #[arg(long)]
    grl_scale: Option<f64>,
    #[arg(long)]
    symmetric_dcmmd: Option<bool>,
    #[arg(long)]
    negative_ratio: Option<usize>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_negatives: Option<usize>,
    #[arg(long)]
    eval_k: Option<usize>,
    #[arg(long, value_parser = parse_domain)]
    target_domain: Option<Domain>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory (from `prepare`).
    #[arg(long)]
    data: PathBuf,
    /// Root directory for run outputs (a subdirectory named
    /// <config-hash>-seed<seed> is created).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the evaluation report.
    #[arg(long)]
    out: PathBuf,
    /// Also compute per-sparsity-bucket metrics.
    #[arg(long)]
    sparsity: bool,
    /// Export sampled representation rows to this file.
    #[arg(long)]
    export_reps: Option<PathBuf>,
    /// Rows per representation group for --export-reps.
    #[arg(long, default_value_t = 50)]
    sample_size: usize,
    /// Include the domain-A specific block in the export.
    #[arg(long)]
    export_specific_a: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20240601)]
    seed: u64,
}

fn main() -> ExitCode {
    // Usage errors exit 1 (validation class); help and version exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Prepare(args) => commands::prepare(args, quiet),
        Command::Train(args) => commands::train(args, quiet),
        Command::Eval(args) => commands::eval(args, quiet),
        Command::Ablate(args) => commands::ablate(args, quiet),
        Command::Gradcheck(args) => commands::gradcheck(args, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
