//! Line-delimited episode logs.
//!
//! A log file holds one episode. Line 1 is an [`EpisodeMeta`] record; every
//! later line is a [`StepRecord`] for one `(t, agent)` pair, ordered by `t`
//! then agent index. Fields are written in declaration order. Floats use
//! shortest round-trip formatting, so re-reading a log is bit-exact.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Obstacle, Status, WorldConfig};
use crate::state::{Action, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub record: String,
    pub scenario: String,
    pub planner: String,
    pub seed: u64,
    pub config: WorldConfig,
    pub ids: Vec<usize>,
    pub radii: Vec<f64>,
    pub v_pref: Vec<f64>,
    pub goals: Vec<Vec2>,
    pub obstacles: Vec<Obstacle>,
}

/// One sensed agent and whether a link to it was requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub id: usize,
    /// Ego-frame position.
    pub p_rel: Vec2,
    pub d_a: f64,
    /// Link probability when the planner has one.
    pub p_link: Option<f64>,
    pub link: bool,
}

/// State of one agent at the start of step `t`, the action it took, the
/// reward it received, and its status after the step. The final record per
/// agent (at `t = steps`) carries no action and a zero reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub agent: usize,
    pub p: Vec2,
    pub v: Vec2,
    pub psi: f64,
    pub action: Option<Action>,
    pub reward: f64,
    pub links: Vec<usize>,
    pub status: Status,
    pub neighbors: Vec<NeighborRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub meta: EpisodeMeta,
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn n_agents(&self) -> usize {
        self.meta.ids.len()
    }

    /// Number of simulated steps.
    pub fn steps(&self) -> usize {
        self.records.iter().map(|r| r.t).max().unwrap_or(0)
    }

    pub fn agent_records(&self, agent: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.agent == agent)
    }

    /// Sum of logged rewards per agent index.
    pub fn returns(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_agents()];
        for r in &self.records {
            out[r.agent] += r.reward;
        }
        out
    }

    /// Status of each agent after the last step.
    pub fn final_status(&self) -> Vec<Status> {
        let mut out = vec![Status::Active; self.n_agents()];
        for r in &self.records {
            out[r.agent] = r.status;
        }
        out
    }

    /// Step after which each agent first reported `AtGoal`.
    pub fn arrival_steps(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_agents()];
        for r in &self.records {
            if r.status == Status::AtGoal && out[r.agent].is_none() && r.action.is_some() {
                out[r.agent] = Some(r.t + 1);
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let line = serde_json::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}")?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(Error::Log { line: 1, reason: "empty log".into() })?;
        let meta: EpisodeMeta =
            serde_json::from_str(&first?).map_err(|e| Error::Log { line: 1, reason: e.to_string() })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let rec: StepRecord =
                serde_json::from_str(&line?).map_err(|e| Error::Log { line: i + 1, reason: e.to_string() })?;
            if rec.agent >= meta.ids.len() {
                return Err(Error::Log { line: i + 1, reason: format!("agent index {} out of range", rec.agent) });
            }
            records.push(rec);
        }
        Ok(EpisodeLog { meta, records })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
