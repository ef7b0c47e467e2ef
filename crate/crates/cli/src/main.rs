//! `semrec`: batch pipeline from item text to evaluated recommendations.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error (including missing or stale inputs), 4 numeric divergence.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "semrec", version, about = "Text-token generative sequential recommendation")]
struct Cli {
    /// TOML config file; its keys override the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default profile (overrides the config file's `profile` key).
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deterministic stub embeddings from an `item_id<TAB>text` file.
    Embed(EmbedArgs),
    /// Train the FSQ codebook on an embedding file.
    TrainTokenizer(TrainTokenizerArgs),
    /// Map every item to its K tokens with a trained codebook.
    Tokenize(TokenizeArgs),
    /// Train the sequence model on user sequences.
    Train(TrainArgs),
    /// Zero-shot or cold-start ranking metrics on a dataset.
    Evaluate(EvaluateArgs),
    /// Train on growing data fractions and fit a power law to eval loss.
    Scaling(ScalingArgs),
    /// Write a seeded multi-domain corpus (item texts and datasets).
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    items: PathBuf,
    /// Output; a `.bin` extension selects the binary encoding.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainTokenizerArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace (default: `<out>.trace`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only these items (first whitespace- or tab-separated field per line).
    #[arg(long)]
    items: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace (default: `<out>.trace`).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Start from this model checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    ZeroShot,
    ColdStart,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Candidate items (one id per line); defaults to every embedded item.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// JSON metrics report.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate only the held-out side of the configured split.
    #[arg(long)]
    held_out: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write beam-decoded top-N lists (`rank item_id log_score`).
    #[arg(long)]
    recommendations: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScalingArgs {
    #[arg(long, required_unless_present = "planted_self_test")]
    tokens: Option<PathBuf>,
    #[arg(long, required_unless_present = "planted_self_test")]
    embeddings: Option<PathBuf>,
    #[arg(long, required_unless_present = "planted_self_test")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated data fractions in (0, 1], strictly increasing.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Fit a curve with a known exponent and check it is recovered.
    #[arg(long)]
    planted_self_test: bool,
    /// Force the run at this fraction to fail as diverged (testing aid).
    #[arg(long, hide = true)]
    inject_divergence: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    items_per_domain: usize,
    #[arg(long, default_value_t = 1000)]
    users_per_domain: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = RunConfig::resolve(cli.config.as_deref(), cli.profile).and_then(|config| match cli.command {
        Command::Embed(a) => commands::embed(config, a),
        Command::TrainTokenizer(a) => commands::train_tokenizer(config, a),
        Command::Tokenize(a) => commands::tokenize(config, a),
        Command::Train(a) => commands::train(config, a),
        Command::Evaluate(a) => commands::evaluate(config, a),
        Command::Scaling(a) => commands::scaling(config, a),
        Command::Synthesize(a) => commands::synthesize(config, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
