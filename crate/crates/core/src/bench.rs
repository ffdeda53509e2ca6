//! Evaluation metrics, link census, and the link histogram.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::EpisodeLog;
use crate::error::Result;
use crate::planner::{run_episode, Planner};
use crate::scenario::{gen_scenario, Scenario};
use crate::sim::{Status, WorldConfig};

/// Trials per reported configuration.
pub const DEFAULT_TRIALS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub seed: u64,
    pub n_agents: usize,
    pub successes: usize,
    pub collisions: usize,
    pub deadlocks: usize,
    /// Step at which the last agent arrived, when every agent succeeded.
    pub completion_steps: Option<usize>,
    pub total_links: usize,
    pub agent_steps: usize,
}

impl TrialMetrics {
    pub fn from_log(log: &EpisodeLog) -> Self {
        let status = log.final_status();
        let count = |s: Status| status.iter().filter(|&&x| x == s).count();
        let successes = count(Status::AtGoal);
        let n = log.n_agents();
        let completion_steps = (successes == n && n > 0)
            .then(|| log.arrival_steps().into_iter().map(|s| s.unwrap_or(0)).max().unwrap_or(0));
        let acting = log.records.iter().filter(|r| r.action.is_some());
        TrialMetrics {
            seed: log.meta.seed,
            n_agents: n,
            successes,
            collisions: count(Status::Collided),
            deadlocks: count(Status::Active),
            completion_steps,
            total_links: acting.clone().map(|r| r.links.len()).sum(),
            agent_steps: acting.count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub planner: String,
    pub trials: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub deadlock_rate: f64,
    /// Mean completion time (s) over trials where every agent succeeded;
    /// `None` (reported as NR) when no trial did.
    pub time_to_goal: Option<f64>,
    pub mean_links_per_agent: f64,
    pub mean_links_per_agent_step: f64,
    pub per_trial: Vec<TrialMetrics>,
}

impl MetricsReport {
    /// Aggregates trials: rates are fractions of all agents across trials,
    /// time-to-goal averages fully successful trials only.
    pub fn from_trials(scenario: &str, planner: &str, dt: f64, per_trial: Vec<TrialMetrics>) -> Self {
        let agents: usize = per_trial.iter().map(|t| t.n_agents).sum();
        let frac = |f: fn(&TrialMetrics) -> usize| {
            if agents == 0 {
                0.0
            } else {
                per_trial.iter().map(f).sum::<usize>() as f64 / agents as f64
            }
        };
        let done: Vec<usize> = per_trial.iter().filter_map(|t| t.completion_steps).collect();
        let time_to_goal =
            (!done.is_empty()).then(|| done.iter().sum::<usize>() as f64 / done.len() as f64 * dt);
        let links: usize = per_trial.iter().map(|t| t.total_links).sum();
        let agent_steps: usize = per_trial.iter().map(|t| t.agent_steps).sum();
        MetricsReport {
            scenario: scenario.into(),
            planner: planner.into(),
            trials: per_trial.len(),
            success_rate: frac(|t| t.successes),
            collision_rate: frac(|t| t.collisions),
            deadlock_rate: frac(|t| t.deadlocks),
            time_to_goal,
            mean_links_per_agent: if agents == 0 { 0.0 } else { links as f64 / agents as f64 },
            mean_links_per_agent_step: if agent_steps == 0 { 0.0 } else { links as f64 / agent_steps as f64 },
            per_trial,
        }
    }

    pub fn from_logs(scenario: &str, planner: &str, dt: f64, logs: &[EpisodeLog]) -> Self {
        Self::from_trials(scenario, planner, dt, logs.iter().map(TrialMetrics::from_log).collect())
    }

    pub fn time_to_goal_label(&self) -> String {
        self.time_to_goal.map_or_else(|| "NR".to_string(), |t| format!("{t:.2}"))
    }

    /// Plain-text table row set.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario            {}\n", self.scenario));
        out.push_str(&format!("planner             {}\n", self.planner));
        out.push_str(&format!("trials              {}\n", self.trials));
        out.push_str(&format!("success rate        {:.2}\n", self.success_rate));
        out.push_str(&format!("collision rate      {:.2}\n", self.collision_rate));
        out.push_str(&format!("deadlock rate       {:.2}\n", self.deadlock_rate));
        out.push_str(&format!("time to goal (s)    {}\n", self.time_to_goal_label()));
        out.push_str(&format!("links / agent       {:.2}\n", self.mean_links_per_agent));
        out.push_str(&format!("links / agent-step  {:.4}\n", self.mean_links_per_agent_step));
        out
    }
}

/// Trial `i` uses scenario seed `spec.seed + i` and the same planner seed.
pub fn trial_seed(spec: &Scenario, i: usize) -> u64 {
    spec.seed.wrapping_add(i as u64)
}

/// Runs `trials` episodes in parallel and aggregates them.
pub fn evaluate(
    planner: &dyn Planner,
    spec: &Scenario,
    trials: usize,
    config: &WorldConfig,
) -> Result<(MetricsReport, Vec<EpisodeLog>)> {
    let logs: Vec<EpisodeLog> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let seed = trial_seed(spec, i);
            let world = gen_scenario(&spec.with_seed(seed), config)?;
            run_episode(world, planner, &spec.label(), seed)
        })
        .collect::<Result<_>>()?;
    let report = MetricsReport::from_logs(&spec.label(), &planner.name(), config.dt, &logs);
    Ok((report, logs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub episode: usize,
    pub agent: usize,
    /// Links the agent actually requested over the episode.
    pub links: usize,
    /// Links had it contacted every other agent at every step.
    pub broadcast_all: usize,
    /// Links had it contacted every agent within `range` at every step.
    pub broadcast_range: usize,
}

/// Per-agent link totals and broadcast-equivalent estimates.
pub fn comm_link_census(logs: &[EpisodeLog], range: f64) -> Vec<CensusRow> {
    let mut rows = Vec::new();
    for (e, log) in logs.iter().enumerate() {
        let n = log.n_agents();
        for agent in 0..n {
            let mut row = CensusRow { episode: e, agent, links: 0, broadcast_all: 0, broadcast_range: 0 };
            for r in log.agent_records(agent).filter(|r| r.action.is_some()) {
                row.links += r.links.len();
                row.broadcast_all += n - 1;
                row.broadcast_range += r.neighbors.iter().filter(|nb| nb.d_a < range).count();
            }
            rows.push(row);
        }
    }
    rows
}

/// Mean link decision per ego-frame cell over `[-window, window]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub window: f64,
    pub cell: f64,
    pub bins: usize,
    /// Row-major `bins × bins`, row 0 at the lowest y; `None` where empty.
    pub mean: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (-self.window + (ix as f64 + 0.5) * self.cell, -self.window + (iy as f64 + 0.5) * self.cell)
    }

    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        self.mean[iy * self.bins + ix]
    }

    /// Plot-ready text: `x y mean count` per occupied cell.
    pub fn to_data(&self) -> String {
        let mut out = String::from("# x y mean_link count\n");
        for iy in 0..self.bins {
            for ix in 0..self.bins {
                if let Some(m) = self.get(ix, iy) {
                    let (x, y) = self.cell_center(ix, iy);
                    out.push_str(&format!("{x} {y} {m} {}\n", self.counts[iy * self.bins + ix]));
                }
            }
        }
        out
    }
}

pub fn comm_histogram(logs: &[EpisodeLog], window: f64, cell: f64) -> Histogram {
    let bins = ((2.0 * window / cell).round() as usize).max(1);
    let mut sums = vec![0.0; bins * bins];
    let mut counts = vec![0usize; bins * bins];
    for log in logs {
        for r in log.records.iter().filter(|r| r.action.is_some()) {
            for nb in &r.neighbors {
                let fx = ((nb.p_rel.x + window) / cell).floor();
                let fy = ((nb.p_rel.y + window) / cell).floor();
                if fx < 0.0 || fy < 0.0 || fx >= bins as f64 || fy >= bins as f64 {
                    continue;
                }
                let i = fy as usize * bins + fx as usize;
                counts[i] += 1;
                sums[i] += if nb.link { 1.0 } else { 0.0 };
            }
        }
    }
    let mean = sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    Histogram { window, cell, bins, mean, counts }
}
