use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "corebert",
    version,
    about = "Two-phase relaxed/full BERT training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        config: PathBuf,
        /// Override a config field, e.g. `--set plan.total_steps=200`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Convert a relaxed checkpoint into a full one.
    Recover { input: PathBuf, output: PathBuf },
    /// Run attention/FFN timing sweeps from a JSON bench spec.
    Bench {
        spec: PathBuf,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Held-out MLM loss and perplexity of a checkpoint on a text file.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// Vocabulary file; defaults to vocab.tsv beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batches: usize,
    },
    /// Show a checkpoint's config, shapes and an attention sanity probe.
    Inspect { checkpoint: PathBuf },
    /// Write a synthetic English-like corpus.
    SynthCorpus {
        output: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    let result = match cli.command {
        Command::Train { config, overrides } => corebert_cli::train(&config, &overrides, &mut out).map(drop),
        Command::Recover { input, output } => corebert_cli::recover(&input, &output, &mut out).map(drop),
        Command::Bench { spec, out: csv } => corebert_cli::bench(&spec, &csv, &mut out).map(drop),
        Command::Eval {
            checkpoint,
            corpus,
            vocab,
            batches,
        } => corebert_cli::eval(&checkpoint, &corpus, vocab.as_deref(), batches, &mut out).map(drop),
        Command::Inspect { checkpoint } => corebert_cli::inspect(&checkpoint, &mut out),
        Command::SynthCorpus { output, bytes, seed } => corebert_cli::synth_corpus(&output, bytes, seed, &mut out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
