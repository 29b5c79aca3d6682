//! `sesame`: generate probe data, train, evaluate, sweep the blur width,
//! check gradients and turn metrics into plot-ready CSVs.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 training divergence.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sesame_core::grad_scopes::Scope;

#[derive(Parser)]
#[command(name = "sesame", version, about = "Toy SesameBERT encoder: training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Task {
    /// Adjacent-bigram detection, where local context decides the label.
    Local,
    /// Entailment pairs that reward lexical overlap, plus the six-cell
    /// diagnostic split.
    HansStyle,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and a manifest of per-cell counts.
    GenData {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training examples.
        #[arg(long)]
        size: Option<usize>,
        /// Held-out examples from the training distribution.
        #[arg(long)]
        dev_size: Option<usize>,
        /// Diagnostic cases per heuristic cell (hans-style only).
        #[arg(long, default_value_t = 50)]
        per_case: usize,
    },
    /// Train a model, save its parameters and write metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a saved model on the configured dev and diagnostic splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one model per blur sigma and summarize dev accuracy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare analytic and central-difference gradients.
    Gradcheck {
        /// Blocks to check; all of them when omitted.
        #[arg(long, value_parser = parse_scope)]
        scope: Vec<Scope>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        inject_wrong_gradient: bool,
    },
    /// Turn metrics.json files under a directory into CSVs.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse().map_err(|e: sesame_core::Error| e.to_string())
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn check(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<sesame_core::Error> for CliError {
    fn from(e: sesame_core::Error) -> Self {
        let code = match e {
            sesame_core::Error::Divergence { .. } => 3,
            // Only the gradient checker perturbs parameters.
            sesame_core::Error::Evaluation { .. } => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            task,
            seed,
            out,
            size,
            dev_size,
            per_case,
        } => commands::gen_data(task, seed, &out, size, dev_size, per_case),
        Command::Train { config } => commands::train(&config),
        Command::Eval { config, checkpoint } => commands::eval(&config, &checkpoint),
        Command::Sweep { config } => commands::sweep(&config),
        Command::Gradcheck {
            scope,
            seed,
            inject_wrong_gradient,
        } => commands::gradcheck(&scope, seed, inject_wrong_gradient),
        Command::Report { metrics } => report::report(&metrics),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
