mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, task file or arguments: exit 2.
    #[error("config error: {0}")]
    Config(String),
    /// A stage failed while running: exit 1.
    #[error("{stage} failed [{code}]: {message}")]
    Stage {
        stage: &'static str,
        code: String,
        message: String,
    },
}

impl CliError {
    pub fn stage(stage: &'static str, code: impl Into<String>, message: impl ToString) -> Self {
        CliError::Stage {
            stage,
            code: code.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "editrefine",
    version,
    about = "Critique-driven iterative image editing and its data pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Store directory; overrides `store` in the config.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SessionArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL file of edit tasks.
    #[arg(long)]
    tasks: PathBuf,
    /// Overrides the global seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the session parallelism in the config.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run edit sessions and print each task's best score.
    Run(SessionArgs),
    /// Run sessions with per-step scoring and log them as raw trajectories.
    Generate(SessionArgs),
    /// Keep improving trajectories and truncate them at their best step.
    Filter(Common),
    /// Expand truncated trajectories into per-step training samples.
    Unroll(Common),
    /// Downsample samples to even out task-type and score buckets.
    Balance {
        #[command(flatten)]
        common: Common,
        /// Sample file to balance [default: <store>/samples.jsonl].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file [default: <store>/balanced.jsonl].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route samples to SFT or RL by the score variance of their trajectory.
    Split {
        #[command(flatten)]
        common: Common,
        /// Sample file to split [default: <store>/balanced.jsonl].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for sft.jsonl and rl.jsonl [default: the store].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare turn budgets on one task set and write a table plus JSON summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// Comma-separated turn budgets, e.g. 1,2,4.
        #[arg(long, value_parser = parse_budgets)]
        budgets: Budgets,
        /// JSONL task file; generated from the [sim] section when absent.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Table path; the summary goes beside it with a .json extension
        /// [default: <store>/report.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write simulated-world tasks as JSONL.
    SimTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `sim.tasks.count`.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Debug, Clone)]
struct Budgets(Vec<u32>);

fn parse_budgets(s: &str) -> Result<Budgets, String> {
    let budgets = s
        .split(',')
        .map(|part| match part.trim().parse::<u32>() {
            Ok(0) => Err("budgets must be at least 1".to_string()),
            Ok(b) => Ok(b),
            Err(_) => Err(format!("{part:?} is not a positive integer")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Budgets(budgets))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Stage { stage, code, message }) => {
            let line = serde_json::json!({"error": code, "stage": stage, "message": message});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
