use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ewe::{Error, Result};
use ewe_cli::{error_record, parse_overrides, run, AppConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "ewe", version, about = "Elementwise embedding models: encode, train, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a corpus into element id grids
    Encode(CommonArgs),
    /// Train a classifier and write a checkpoint
    Train(CommonArgs),
    /// Micro-averaged precision, recall and F1
    Eval(CommonArgs),
    /// Forward-pass latency sweep
    Bench(CommonArgs),
    /// Label count statistics of a corpus
    Stats(CommonArgs),
    /// Rewrite corpus codes with First-/Later- prefixes
    Relabel(CommonArgs),
    /// Generate a synthetic labeled corpus
    Synth(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

impl Command {
    fn split(self) -> (&'static str, CommonArgs) {
        match self {
            Command::Encode(a) => ("encode", a),
            Command::Train(a) => ("train", a),
            Command::Eval(a) => ("eval", a),
            Command::Bench(a) => ("bench", a),
            Command::Stats(a) => ("stats", a),
            Command::Relabel(a) => ("relabel", a),
            Command::Synth(a) => ("synth", a),
        }
    }
}

/// File values, then `EWE_SEED`, then command-line flags.
fn load_config(args: &CommonArgs) -> Result<AppConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        overrides.push(("seed".to_string(), seed));
    }
    overrides.extend(parse_overrides(&args.overrides)?);
    AppConfig::parse(&text, &overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let (name, args) = Cli::parse().command.split();
    let outcome: std::result::Result<(), Error> = load_config(&args).and_then(|cfg| run(name, &cfg));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            println!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}
