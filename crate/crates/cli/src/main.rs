use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsatc::pipeline::{self, Context, RunConfig, Stage, OUT_DIR_ENV};
use lsatc::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "lsatc", version, about = "Latent-space peptide extension design pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for oracle evaluation and fitness scoring.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output root for stage artifacts.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "lsatc-out")]
    out_dir: PathBuf,
    /// Override a config field, e.g. `--set cmaes.iterations=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Accept or replace artifacts produced under a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the unlabelled set and the oracle-labelled corpus.
    GenData,
    /// Train the sequence autoencoder.
    TrainWae,
    /// Train the property surrogate.
    TrainSurrogate,
    /// Run CMA-ES in latent space against the surrogate.
    Optimize,
    /// Select top samplers from the trajectory and cluster them.
    Collect,
    /// Draw unique valid peptides from the collected samplers.
    Sample,
    /// Score generated peptides against the GMM and random baselines.
    Evaluate,
    /// Cluster the best candidates and pick representatives.
    SelectFinal,
    /// Finite-difference check of every layer and loss.
    GradCheck,
    /// Run every stage from gen-data to select-final.
    RunAll,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::RunAll => "run-all",
            c => c.stage().expect("single stage").command(),
        }
    }

    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenData => Stage::Data,
            Command::TrainWae => Stage::Wae,
            Command::TrainSurrogate => Stage::Surrogate,
            Command::Optimize => Stage::Optimize,
            Command::Collect => Stage::Collect,
            Command::Sample => Stage::Sample,
            Command::Evaluate => Stage::Evaluate,
            Command::SelectFinal => Stage::Select,
            Command::GradCheck => Stage::GradCheck,
            Command::RunAll => return None,
        })
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    let c = &cli.common;
    let config = RunConfig::load(c.config.as_deref(), &c.overrides, c.seed)?;
    let ctx = Context::new(c.out_dir.clone(), config, c.workers, c.force)?;
    match cli.command.stage() {
        Some(stage) => pipeline::run_stage(&ctx, stage),
        None => pipeline::run_all(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", json!({"command": command, "status": "ok", "summary": summary}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!(
                "{}",
                json!({"command": command, "status": "error", "error": e.to_string()})
            );
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
