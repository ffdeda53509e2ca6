use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dmca::episode::EpisodeLog;
use dmca::scenario::Family;
use dmca::train::TrainConfig;
use dmca_cli::*;

#[derive(Parser)]
#[command(name = "dmca", version, about = "Learned selective-communication collision avoidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerKind {
    Ckpt,
    Orca,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with the phase curriculum.
    Train {
        /// TOML training config; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `dmca` (no link cost) or `dmca-lc` (λ = 1e-4).
        #[arg(long, default_value = "dmca")]
        preset: String,
        /// Output directory for metrics, config and checkpoints.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Keep only the first curriculum phase.
        #[arg(long)]
        phase1_only: bool,
        #[arg(long)]
        max_env_steps: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint or ORCA on a scenario.
    Eval {
        #[arg(long, value_enum)]
        planner: PlannerKind,
        /// Checkpoint file, required with `--planner ckpt`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        scenario: Family,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        t_max: Option<usize>,
        /// Sample actions and links instead of acting greedily.
        #[arg(long)]
        sample: bool,
        /// Writes report.json, episode logs and trajectory traces here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Summarize a recorded episode and export its trajectories.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Trajectory trace output (`t agent x y psi status`).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// ORCA results on one scenario family across agent counts.
    Baseline {
        #[arg(long)]
        scenario: Family,
        #[arg(long, value_delimiter = ',', default_value = "4,6,10")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Link histogram over ego-frame neighbor positions, plus link census.
    Histogram {
        /// Directory of episode logs.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        window: f64,
        #[arg(long, default_value_t = 0.25)]
        cell: f64,
        /// Plot data output (`x y mean_link count`); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, preset, out, seed, phase1_only, max_env_steps, quiet } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path).with_context(|| format!("reading {}", path.display()))?,
                None => TrainConfig::default(),
            }
            .with_preset(&preset)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if phase1_only {
                cfg = cfg.phase1_only();
            }
            if max_env_steps.is_some() {
                cfg.max_env_steps = max_env_steps;
            }
            let summary = run_train(cfg, &out, quiet)?;
            println!("updates {}  env steps {}", summary.updates, summary.env_steps);
            if let Some(path) = summary.checkpoints.last() {
                println!("final checkpoint {}", path.display());
            }
            if let Some(report) = &summary.last_eval {
                print!("{}", report.table());
            }
        }
        Command::Eval { planner, ckpt, scenario, n, trials, seed, radius, t_max, sample, out, json } => {
            let choice = match planner {
                PlannerKind::Ckpt => PlannerChoice::Checkpoint {
                    path: ckpt.context("--planner ckpt needs --ckpt <file>")?,
                    sample,
                },
                PlannerKind::Orca => PlannerChoice::Orca,
            };
            let args = ScenarioArgs { family: scenario, n_agents: n, seed, radius, t_max };
            let output = run_eval(&choice, &args, trials, out.as_deref())?;
            if json {
                println!("{}", serde_json::to_string(&output)?);
            } else {
                print!("{}", output.report.table());
            }
        }
        Command::Replay { log, trace, json } => {
            let episode = EpisodeLog::load(&log).with_context(|| format!("reading {}", log.display()))?;
            let rows = replay_summary(&episode);
            if let Some(path) = trace {
                std::fs::write(&path, trace_data(&episode))?;
            }
            if json {
                println!("{}", serde_json::to_string(&rows)?);
            } else {
                print!("{}", replay_table(&episode, &rows));
            }
        }
        Command::Baseline { scenario, n, trials, seed, json } => {
            let reports = run_baseline(scenario, &n, trials, seed)?;
            if json {
                println!("{}", serde_json::to_string(&reports)?);
            } else {
                print!("{}", report_rows(&reports));
            }
        }
        Command::Histogram { logs, window, cell, out, json } => {
            let (hist, census) = run_histogram(&logs, window, cell)?;
            match out {
                Some(path) => std::fs::write(&path, hist.to_data())?,
                None if !json => print!("{}", hist.to_data()),
                None => {}
            }
            if json {
                println!("{}", serde_json::to_string(&serde_json::json!({ "histogram": hist, "census": census }))?);
            } else {
                print!("{}", census_table(&census));
            }
        }
    }
    Ok(())
}
