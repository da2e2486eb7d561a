use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use tgexplain::pipeline::{self, RunConfig};
use tgexplain::{Error, Result};

const ENV_OUTPUT_DIR: &str = "TGEXPLAIN_OUTPUT_DIR";
const ENV_THREADS: &str = "TGEXPLAIN_THREADS";

/// Explainable live-update link prediction on snapshot graphs.
#[derive(Debug, Parser)]
#[command(name = "tgexplain", version)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.buffer_size=3`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bucket an edge stream into snapshots and write a summary.
    Ingest,
    /// Generate a planted dataset with ground truth.
    Synth,
    /// Live-update training; writes metrics, attention CSVs and a checkpoint.
    Train,
    /// Replay the stream through a checkpointed model and report MRR.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export explanations of a checkpoint's buffered snapshots.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fidelity of top-k structural masks over the sparsity grid.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn env_overrides() -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
        // Quoted so a directory named like a JSON literal stays a string.
        let quoted = serde_json::to_string(&dir).expect("strings serialize");
        out.push(format!("output_dir={quoted}"));
    }
    if let Ok(n) = std::env::var(ENV_THREADS) {
        out.push(format!("threads={n}"));
    }
    out
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = env_overrides();
    overrides.extend(cli.overrides);
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Ingest => print_json(&pipeline::run_ingest(&cfg)?.summary())?,
        Command::Synth => pipeline::run_synth(&cfg)?,
        Command::Train => print_json(&pipeline::run_train(&cfg)?)?,
        Command::Eval { checkpoint } => print_json(&pipeline::run_eval(&cfg, checkpoint.as_deref())?)?,
        Command::Explain { checkpoint } => pipeline::run_explain(&cfg, checkpoint.as_deref())?,
        Command::Sweep { checkpoint } => {
            for row in pipeline::run_sweep(&cfg, checkpoint.as_deref())? {
                println!("{:?},{:?}", row.sparsity, row.fidelity);
            }
        }
    }
    info!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report(e: &Error) {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error code={} exit={}: {msg}", e.code(), e.exit_code());
}
