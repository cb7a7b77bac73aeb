//! `geli`: runs the reward-decomposition experiment pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geli_core::pipeline::{
    ExperimentConfig, Pipeline, PipelineError, RunOptions, Stage, StageOutcome,
};

#[derive(Parser, Debug)]
#[command(name = "geli", version, about = "Reward decomposition experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset, ground truth and splits.
    Generate(Common),
    /// Train a reward function for every configured method.
    TrainReward(Common),
    /// Evaluate trained rewards on the test split.
    EvalReward(Common),
    /// Adapt a policy with PPO against the configured reward.
    AdaptPolicy(Common),
    /// Write the comparison table.
    Report(Common),
    /// Run every stage in order, skipping those already up to date.
    RunAll(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Rerun stages whose records are current and overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Keep going when a method fails; missing rows become gaps in the report.
    #[arg(long)]
    partial: bool,
}

impl Command {
    fn parts(&self) -> (&Common, Option<Stage>) {
        match self {
            Command::Generate(c) => (c, Some(Stage::Generate)),
            Command::TrainReward(c) => (c, Some(Stage::TrainReward)),
            Command::EvalReward(c) => (c, Some(Stage::EvalReward)),
            Command::AdaptPolicy(c) => (c, Some(Stage::AdaptPolicy)),
            Command::Report(c) => (c, Some(Stage::Report)),
            Command::RunAll(c) => (c, None),
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<StageOutcome>, PipelineError> {
    let (common, stage) = cli.command.parts();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let opts = RunOptions {
        force: common.force,
        partial: common.partial,
    };
    let mut pipeline = Pipeline::open(cfg, opts)?;
    match stage {
        Some(stage) => Ok(vec![pipeline.run_stage(stage)?]),
        None => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcomes) => {
            for outcome in outcomes {
                match outcome {
                    StageOutcome::Ran(s) => eprintln!("{s}: done"),
                    StageOutcome::UpToDate(s) => eprintln!("{s}: up to date"),
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
