use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod experiment;

use experiment::ExperimentConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Hybrid-policy RL experiments on enumerable toy tasks.
#[derive(Debug, Parser)]
#[command(name = "rlplus", version)]
struct Cli {
    /// Experiment configuration (`key = value` per line).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides `trainer.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the data-parallel loops.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy; writes steps.jsonl, checkpoints and summary.json.
    Train,
    /// Exact and sampled estimator diagnostics with a table of checks.
    Diagnose,
    /// Sampled pass@k curves for one or more checkpoints.
    Passk {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Exact success probability, pass@k and chi-squared for a policy.
    Oracle,
}

fn fail(code: u8, err: anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::from(code)
}

#[cfg(feature = "parallel")]
fn set_workers(n: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_workers(_n: usize) -> anyhow::Result<()> {
    Ok(())
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    if cli.workers == 0 {
        anyhow::bail!("--workers must be at least 1");
    }
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, cli.seed),
        None => ExperimentConfig::parse("", cli.seed),
    }
}

fn run(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<bool> {
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Train => commands::train_cmd(cfg, out),
        Command::Diagnose => commands::diagnose_cmd(cfg, out),
        Command::Passk { checkpoints } => commands::passk_cmd(cfg, out, checkpoints),
        Command::Oracle => commands::oracle_cmd(cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = set_workers(cli.workers) {
        return fail(EXIT_RUNTIME, e);
    }
    match run(&cli, &cfg, &cli.out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}
