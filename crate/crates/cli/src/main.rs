use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use preictal_core::error::Error;
use preictal_core::harness::{load_config, run_command, Command, ExperimentConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "preictal", version, about = "Synthetic preictal forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the pretraining sets and the 40-clip few-shot pool.
    GenData(Args),
    /// Pretrain every configured data configuration into the cache.
    Pretrain(Args),
    /// Fine-tune one episode and write its predictions.
    Finetune(Args),
    /// Run the few-shot protocol for every configured arm.
    Evaluate(Args),
    /// Run all six pretraining configurations across shots.
    Ablate(Args),
    /// Sweep the pretraining mask ratio.
    SweepMask(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(short, long)]
    quiet: bool,
}

impl Sub {
    fn split(self) -> (Command, Args) {
        match self {
            Sub::GenData(a) => (Command::GenData, a),
            Sub::Pretrain(a) => (Command::Pretrain, a),
            Sub::Finetune(a) => (Command::Finetune, a),
            Sub::Evaluate(a) => (Command::Evaluate, a),
            Sub::Ablate(a) => (Command::Ablate, a),
            Sub::SweepMask(a) => (Command::SweepMask, a),
        }
    }
}

fn resolve(args: &Args) -> Result<ExperimentConfig, Error> {
    let mut exp = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default().with_env_overrides(),
    };
    if let Some(seed) = args.seed {
        exp.seed = seed;
    }
    Ok(exp)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let (command, args) = cli.command.split();
    let exp = match resolve(&args) {
        Ok(exp) => exp,
        Err(e) => {
            eprintln!("preictal: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let quiet = args.quiet;
    let mut log = |msg: &str| {
        if !quiet {
            eprintln!("[{command}] {msg}");
        }
    };
    match run_command(command, &exp, &mut log) {
        Ok(summary) => {
            for file in &summary.files {
                println!("{}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("preictal: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("preictal: {e}");
            eprintln!("preictal: reproduce with seed {}", e.reproduction_seed().unwrap_or(exp.seed));
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
