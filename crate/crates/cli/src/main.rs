//! `debias` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "debias", version, about = "Rationale-based debiasing with natural-language feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic biography corpus as JSONL.
    Synth(SynthArgs),
    /// Train the bias extractor/predictor and write the vocabulary.
    TrainBias(TrainBiasArgs),
    /// Train the task extractor/predictor against a frozen bias model.
    TrainTask(TrainTaskArgs),
    /// Score evaluation arms on a labelled corpus.
    Eval(EvalArgs),
    /// Parse one piece of feedback against one input.
    Parse(ParseArgs),
    /// Exact-match accuracy of a parser on a golden suite.
    ParserEval(ParserEvalArgs),
    /// Replay scripted feedback and report before/after metrics.
    Simulate(SimulateArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with SynthConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Probability that gender follows the profession's designated gender.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub professions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Label map destination; defaults to labels.json next to --out.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

/// Mirrors `TrainConfig`; unset flags keep the config-file or preset value.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// JSON or `key = value` file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda_dc: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda_full: Option<f64>,
    #[arg(long)]
    pub samples_per_example: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub eval_policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainBiasArgs {
    /// Run directory for vocab, labels, checkpoints and reports.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Extra corpora whose words join the vocabulary (typically the task
    /// training set).
    #[arg(long = "vocab-corpus")]
    pub vocab_corpus: Vec<PathBuf>,
    /// Defaults to labels.json next to --train.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainTaskArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Repeatable; defaults to every registered arm.
    #[arg(long = "arm")]
    pub arms: Vec<String>,
    #[arg(long, default_value = "threshold:0.5")]
    pub policy: String,
    /// Defaults to eval_report.json in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Input text the feedback refers to.
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub feedback: String,
    #[arg(long, default_value = "grammar")]
    pub parser: String,
    #[arg(long, default_value = "gender")]
    pub bias_variable: String,
    /// Print the full parse as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ParserEvalArgs {
    /// Golden JSONL; defaults to the bundled suite.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "grammar")]
    pub parser: String,
    /// Also list every miss.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSONL of {example_index, feedback, mode?, alpha?}.
    #[arg(long)]
    pub feedback: PathBuf,
    #[arg(long, default_value = "grammar")]
    pub parser: String,
    #[arg(long, default_value = "threshold:0.5")]
    pub policy: String,
    /// Defaults to simulation_report.json in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Without a run directory the service answers 503 for model routes.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value = "threshold:0.5")]
    pub policy: String,
    #[arg(long, default_value_t = 3600)]
    pub ttl_secs: u64,
    /// Restore sessions from and save them to this JSON file.
    #[arg(long)]
    pub persist: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
