//! `crowdfm`: data generation, training, rollouts and benchmarks for the
//! flow-matching crowd planner.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use crowdfm_core::checkpoint::CHECKPOINT_VERSION;
use crowdfm_core::config::{RunConfig, CONFIG_ENV, CONFIG_VERSION};
use crowdfm_core::scene::DATASET_VERSION;

#[derive(Parser, Debug)]
#[command(name = "crowdfm", about = "Flow-matching local planner for crowded scenes")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. `--set flow.guidance_scale=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the flow training set and a disjoint scorer set.
    GenData(GenDataArgs),
    /// Train the flow model.
    TrainFlow(TrainArgs),
    /// Train the candidate scorer against a frozen flow model.
    TrainScorer(TrainScorerArgs),
    /// Run one closed-loop episode.
    Rollout(RolloutArgs),
    /// Run the benchmark suite and write reports.
    Bench(BenchArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory; receives flow.jsonl, scorer.jsonl and config.toml.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flow-training records.
    #[arg(long)]
    pub count: Option<usize>,
    /// Scorer records; defaults to `count · data.scorer_ratio`.
    #[arg(long)]
    pub scorer_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory from gen-data, or a .jsonl file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train until this step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Training-log CSV; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write the checkpoint every N steps as well as at the end.
    #[arg(long, default_value_t = 250)]
    pub save_every: u64,
}

#[derive(Args, Debug)]
pub struct TrainScorerArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Frozen flow checkpoint used to generate candidates.
    #[arg(long)]
    pub flow: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    /// Flow checkpoint; defaults to `paths.flow_checkpoint`. Baselines need none.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Scorer checkpoint; without it candidates are picked by the cost function.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    /// sparse, dense or corridor.
    #[arg(long, default_value = "dense")]
    pub difficulty: String,
    /// Planner variant; defaults to the full pipeline.
    #[arg(long)]
    pub variant: Option<String>,
    /// Episode CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one SVG frame per replan step, optionally into the given directory.
    #[arg(long, num_args = 0..=1, value_name = "DIR")]
    pub render: Option<Option<PathBuf>>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// sparse, dense, corridor or mixed.
    #[arg(long, default_value = "dense")]
    pub suite: String,
    /// Runs per world.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Worlds in the suite.
    #[arg(long)]
    pub worlds: Option<usize>,
    /// Output directory for report.csv, episodes.csv, hlp.csv and hlp.svg.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flow checkpoint; defaults to `paths.flow_checkpoint`.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Scorer checkpoint; enables refine_scorer and the HLP comparison.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Comma-separated variants; defaults to every learned variant available.
    #[arg(long)]
    pub variants: Option<String>,
    /// Dataset directory whose held-out scorer records feed the HLP comparison.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
pub enum Failure {
    /// Bad arguments or configuration: exit 1.
    Usage(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<crowdfm_core::Error>() {
            Some(crowdfm_core::Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<crowdfm_core::Error> for Failure {
    fn from(e: crowdfm_core::Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn version_string() -> String {
    format!(
        "{} (config schema {CONFIG_VERSION}, checkpoint format {CHECKPOINT_VERSION}, dataset format {DATASET_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(version_string().into_boxed_str());
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::GenData(a) => commands::gen_data(cfg, a),
        Cmd::TrainFlow(a) => commands::train_flow(cfg, a),
        Cmd::TrainScorer(a) => commands::train_scorer(cfg, a),
        Cmd::Rollout(a) => commands::rollout(cfg, a),
        Cmd::Bench(a) => commands::bench(cfg, a),
        Cmd::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
