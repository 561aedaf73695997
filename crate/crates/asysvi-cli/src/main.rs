//! `asysvi`: run stochastic variational inference experiments from flat
//! config files, sweep one parameter at a time, inspect learned topics and
//! generate synthetic corpora.
//!
//! Exit codes: 0 success, 2 configuration or input errors, 3 runtime
//! failures of the optimization itself (divergence, staleness starvation).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod matrixio;
mod runner;

#[derive(Parser)]
#[command(
    name = "asysvi",
    version,
    about = "Serial and asynchronous stochastic variational inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment described by a config file.
    Run {
        /// Path to the flat key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config file's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// summary.json of a finished serial run to pair against for
        /// speed-up and perplexity ratios.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the config once per value of one parameter and aggregate a CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: num_workers, B, batch, kappa, tau0.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. "0,2,5".
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse an existing baseline summary instead of running one.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Print each topic's top words from a saved topic matrix.
    Topics {
        /// Topic matrix file ("K W" header plus K dense rows).
        #[arg(long)]
        lambda: PathBuf,
        /// Vocabulary file, one word per line.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
    /// Generate a synthetic block-topic corpus.
    Gen {
        #[arg(long, default_value_t = 2)]
        topics: usize,
        #[arg(long, default_value_t = 10)]
        vocab: usize,
        #[arg(long, default_value_t = 500)]
        docs: usize,
        #[arg(long, default_value_t = 100)]
        doc_length: usize,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Configuration and input problems exit 2; failures of the optimization
/// run itself exit 3.
fn exit_code(err: &asysvi::Error) -> u8 {
    match err {
        asysvi::Error::Divergence { .. } | asysvi::Error::StalenessStarvation { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, baseline } => {
            runner::cmd_run(&config, seed, out, baseline)
        }
        Command::Sweep { config, param, values, seed, out, baseline } => {
            runner::cmd_sweep(&config, &param, &values, seed, out, baseline)
        }
        Command::Topics { lambda, vocab, top_n } => runner::cmd_topics(&lambda, &vocab, top_n),
        Command::Gen { topics, vocab, docs, doc_length, alpha, seed, out } => {
            runner::cmd_gen(topics, vocab, docs, doc_length, alpha, seed, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
