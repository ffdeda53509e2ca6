//! Command implementations behind the `dmca` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmca::bench::{comm_histogram, comm_link_census, evaluate, CensusRow, Histogram, MetricsReport};
use dmca::episode::EpisodeLog;
use dmca::orca::OrcaConfig;
use dmca::planner::{OrcaPlanner, Planner, PolicyPlanner};
use dmca::policy::{Mode, Policy};
use dmca::scenario::{Family, RadiusSpec, Scenario};
use dmca::sim::{Status, WorldConfig};
use dmca::train::{MetricsRecord, TrainConfig, TrainSummary, Trainer};
use serde::Serialize;

/// Where an evaluation's actions come from.
pub enum PlannerChoice {
    Checkpoint { path: PathBuf, sample: bool },
    Orca,
}

impl PlannerChoice {
    pub fn build(&self) -> Result<Box<dyn Planner>> {
        Ok(match self {
            PlannerChoice::Checkpoint { path, sample } => {
                let policy = Policy::load(path).with_context(|| format!("loading {}", path.display()))?;
                let mode = if *sample { Mode::Sample } else { Mode::Greedy };
                Box::new(PolicyPlanner { policy, mode })
            }
            PlannerChoice::Orca => Box::new(OrcaPlanner { config: OrcaConfig::default() }),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioArgs {
    pub family: Family,
    pub n_agents: usize,
    pub seed: u64,
    /// Fixed agent radius; the family default when absent.
    pub radius: Option<f64>,
    pub t_max: Option<usize>,
}

impl ScenarioArgs {
    pub fn scenario(&self) -> Scenario {
        let mut spec = Scenario::standard(self.family, self.n_agents, self.seed);
        if let Some(r) = self.radius {
            spec.radius = RadiusSpec::Fixed(r);
        }
        spec
    }

    pub fn world(&self) -> WorldConfig {
        let mut config = WorldConfig::default();
        if let Some(t) = self.t_max {
            config.t_max = t;
        }
        config
    }
}

#[derive(Serialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub census: Vec<CensusRow>,
}

/// Runs `trials` episodes and, with `out`, writes `report.json`, one log
/// per trial and a trajectory trace per trial.
pub fn run_eval(planner: &PlannerChoice, args: &ScenarioArgs, trials: usize, out: Option<&Path>) -> Result<EvalOutput> {
    if trials == 0 {
        bail!("trials must be at least 1");
    }
    let planner = planner.build()?;
    let (report, logs) = evaluate(planner.as_ref(), &args.scenario(), trials, &args.world())?;
    let census = comm_link_census(&logs, args.world().r_neighbor);
    let output = EvalOutput { report, census };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&output)?)?;
        for log in &logs {
            log.save(dir.join(format!("episode_{}.jsonl", log.meta.seed)))?;
            fs::write(dir.join(format!("trace_{}.dat", log.meta.seed)), trace_data(log))?;
        }
    }
    Ok(output)
}

/// ORCA on one family at several agent counts.
pub fn run_baseline(family: Family, counts: &[usize], trials: usize, seed: u64) -> Result<Vec<MetricsReport>> {
    counts
        .iter()
        .map(|&n| {
            let args = ScenarioArgs { family, n_agents: n, seed, radius: None, t_max: None };
            Ok(run_eval(&PlannerChoice::Orca, &args, trials, None)?.report)
        })
        .collect()
}

/// One row per report: the columns of a results table.
pub fn report_rows(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<22} {:<15} {:>6} {:>8} {:>9} {:>8} {:>10} {:>10}", "scenario", "planner", "trials", "success", "collision", "deadlock", "time (s)", "links/agt").unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<22} {:<15} {:>6} {:>8.2} {:>9.2} {:>8.2} {:>10} {:>10.2}",
            r.scenario,
            r.planner,
            r.trials,
            r.success_rate,
            r.collision_rate,
            r.deadlock_rate,
            r.time_to_goal_label(),
            r.mean_links_per_agent
        )
        .unwrap();
    }
    out
}

pub fn census_table(rows: &[CensusRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:>7} {:>5} {:>7} {:>13} {:>15}", "episode", "agent", "links", "broadcast_all", "broadcast_range").unwrap();
    for r in rows {
        writeln!(out, "{:>7} {:>5} {:>7} {:>13} {:>15}", r.episode, r.agent, r.links, r.broadcast_all, r.broadcast_range)
            .unwrap();
    }
    out
}

/// Plot-ready trajectories: `t agent x y psi status` per line.
pub fn trace_data(log: &EpisodeLog) -> String {
    let mut out = String::from("# t agent x y psi status\n");
    for r in &log.records {
        let status = match r.status {
            Status::Active => "active",
            Status::AtGoal => "at_goal",
            Status::Collided => "collided",
        };
        writeln!(out, "{} {} {} {} {} {}", r.t, r.agent, r.p.x, r.p.y, r.psi, status).unwrap();
    }
    out
}

#[derive(Debug, Serialize)]
pub struct AgentSummary {
    pub agent: usize,
    pub status: Status,
    pub arrival_step: Option<usize>,
    pub episode_return: f64,
    pub links: usize,
}

pub fn replay_summary(log: &EpisodeLog) -> Vec<AgentSummary> {
    let status = log.final_status();
    let arrivals = log.arrival_steps();
    let returns = log.returns();
    (0..log.n_agents())
        .map(|k| AgentSummary {
            agent: k,
            status: status[k],
            arrival_step: arrivals[k],
            episode_return: returns[k],
            links: log.agent_records(k).map(|r| r.links.len()).sum(),
        })
        .collect()
}

pub fn replay_table(log: &EpisodeLog, rows: &[AgentSummary]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{} / {} / seed {} / {} steps",
        log.meta.scenario,
        log.meta.planner,
        log.meta.seed,
        log.steps()
    )
    .unwrap();
    writeln!(out, "{:>5} {:>9} {:>8} {:>9} {:>6}", "agent", "status", "arrival", "return", "links").unwrap();
    for r in rows {
        let status = match r.status {
            Status::Active => "deadlock",
            Status::AtGoal => "goal",
            Status::Collided => "collided",
        };
        let arrival = r.arrival_step.map_or("-".to_string(), |s| s.to_string());
        writeln!(out, "{:>5} {:>9} {:>8} {:>9.4} {:>6}", r.agent, status, arrival, r.episode_return, r.links).unwrap();
    }
    out
}

/// Every `*.jsonl` episode log directly inside `dir`, in name order.
/// Files that are not episode logs (a metrics log, say) are skipped.
pub fn load_logs(dir: &Path) -> Result<Vec<EpisodeLog>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let logs: Vec<EpisodeLog> = paths.iter().filter_map(|p| EpisodeLog::load(p).ok()).collect();
    if logs.is_empty() {
        bail!("no episode logs in {}", dir.display());
    }
    Ok(logs)
}

pub fn run_histogram(dir: &Path, window: f64, cell: f64) -> Result<(Histogram, Vec<CensusRow>)> {
    if !(window > 0.0 && cell > 0.0) {
        bail!("window and cell must be positive");
    }
    let logs = load_logs(dir)?;
    let range = logs[0].meta.config.r_neighbor;
    Ok((comm_histogram(&logs, window, cell), comm_link_census(&logs, range)))
}

/// Trains with progress lines on stdout; returns the summary.
pub fn run_train(config: TrainConfig, out: &Path, quiet: bool) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run(Some(out), |r| {
        if !quiet {
            println!("{}", progress_line(r));
        }
    })?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&SummaryFile::from(&summary))?)?;
    Ok(summary)
}

pub fn progress_line(r: &MetricsRecord) -> String {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
    let mut line = format!(
        "update {:>5} {} steps {:>8} return {} success {} collision {} links {:.3} loss {:.4}",
        r.update,
        r.phase,
        r.env_steps,
        opt(r.mean_return),
        opt(r.success_rate),
        opt(r.collision_rate),
        r.mean_links,
        r.loss.total
    );
    if let Some(s) = r.eval_success {
        write!(line, " eval {s:.2}").unwrap();
    }
    line
}

#[derive(Serialize)]
struct SummaryFile {
    updates: usize,
    env_steps: u64,
    checkpoints: Vec<PathBuf>,
    reached_target: Option<(usize, u64)>,
    last_eval: Option<MetricsReport>,
}

impl From<&TrainSummary> for SummaryFile {
    fn from(s: &TrainSummary) -> Self {
        SummaryFile {
            updates: s.updates,
            env_steps: s.env_steps,
            checkpoints: s.checkpoints.clone(),
            reached_target: s.reached_target,
            last_eval: s.last_eval.clone(),
        }
    }
}
