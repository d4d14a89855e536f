//! `reflex`: benchmark synthesis, reward scoring, RL objective evaluation,
//! and repair metrics for tool-calling agents, over JSONL files.

mod commands;
mod config;
mod stream;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "reflex",
    version,
    about = "Benchmark synthesis, reward scoring, and repair metrics for tool-calling agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file with every numeric knob.
    #[arg(long, env = "REFLEX_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "REFLEX_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Perturb clean trajectories into train/test benchmark items.
    Perturb {
        #[command(flatten)]
        common: CommonArgs,
        /// Clean-trajectory JSONL: {"messages": [...]}.
        #[arg(long)]
        input: PathBuf,
        /// Tool schema JSON (array of tool schemas).
        #[arg(long)]
        schema: PathBuf,
        /// Master seed; overrides the config's perturb.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score completions against ground truths.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// JSONL of {"completion": ..., "ground_truth": ...}.
        #[arg(long)]
        input: PathBuf,
    },
    /// Evaluate the clipped objective over rollout groups.
    RlEval {
        #[command(flatten)]
        common: CommonArgs,
        /// JSONL of {"group_id", "rewards", "logp_new", "logp_old"}.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compute repair rates from attempts against hidden answers.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// JSONL of {"item_id", "attempts": [...]}.
        #[arg(long)]
        attempts: PathBuf,
        /// Hidden-answer JSONL produced by `perturb`.
        #[arg(long)]
        answers: PathBuf,
        /// Tool schema JSON; when given, answers are sanity-checked.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Attempt budget(s); repeatable.
        #[arg(short, long = "n", default_values_t = [1usize])]
        n: Vec<usize>,
    },
    /// Check a trajectory corpus; problems become reject records.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        /// Trajectory JSONL to check.
        #[arg(long)]
        input: PathBuf,
        /// Tool schema JSON; when given, calls are validated against it.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Summarize pipeline outputs in a directory.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding earlier outputs (train/test/answers/scores/...).
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}");
            let kind = if message.starts_with("invalid config") {
                "config"
            } else if err.downcast_ref::<std::io::Error>().is_some() {
                "io"
            } else {
                "fatal"
            };
            let record = serde_json::json!({"error": {"kind": kind, "message": message}});
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Perturb {
            common,
            input,
            schema,
            seed,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = out_dir(&common, &cfg)?;
            commands::perturb(&cfg, &input, &schema, seed, &out)
        }
        Command::Score { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = out_dir(&common, &cfg)?;
            commands::score(&cfg, &input, &out)
        }
        Command::RlEval { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = out_dir(&common, &cfg)?;
            commands::rl_eval(&cfg, &input, &out)
        }
        Command::Eval {
            common,
            attempts,
            answers,
            schema,
            n,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = out_dir(&common, &cfg)?;
            commands::eval(&cfg, &attempts, &answers, schema.as_deref(), &n, &out)
        }
        Command::Validate {
            common,
            input,
            schema,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = out_dir(&common, &cfg)?;
            commands::validate(&cfg, &input, schema.as_deref(), &out)
        }
        Command::Stats { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = out_dir(&common, &cfg)?;
            commands::stats(&input, &out)
        }
    }
}

fn out_dir(common: &CommonArgs, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.io.out_dir.clone())
        .ok_or_else(|| {
            anyhow::anyhow!(
                "invalid config: no output directory (use --out, REFLEX_OUT, or io.out_dir)"
            )
        })?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
