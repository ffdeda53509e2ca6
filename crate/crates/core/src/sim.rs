//! World stepping, collision and goal detection, neighbor queries, the
//! request-reply link bus, and the per-step reward.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{
    ego_frame, ego_input, ego_self_obs, observe_body, wrap_angle, Action, AgentState, EgoInput,
    HiddenState, NeighborObs, Vec2,
};

pub const GOAL_REWARD: f64 = 1.0;
pub const COLLISION_REWARD: f64 = -0.25;
/// Clearance below which the proximity penalty applies.
pub const PROXIMITY_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub dt: f64,
    pub r_neighbor: f64,
    /// Goal-reach tolerance; `None` uses each agent's radius.
    pub goal_tol: Option<f64>,
    pub max_dpsi: f64,
    pub t_max: usize,
    pub lambda_comm: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dt: 0.1,
            r_neighbor: 3.0,
            goal_tol: None,
            max_dpsi: PI / 6.0,
            t_max: 500,
            lambda_comm: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if !(self.r_neighbor > 0.0) {
            return bad("r_neighbor must be > 0");
        }
        if matches!(self.goal_tol, Some(t) if !(t > 0.0)) {
            return bad("goal_tol must be > 0");
        }
        if !(self.max_dpsi > 0.0 && self.max_dpsi <= PI) {
            return bad("max_dpsi must lie in (0, π]");
        }
        if self.t_max == 0 {
            return bad("t_max must be ≥ 1");
        }
        if !(self.lambda_comm >= 0.0) {
            return bad("lambda_comm must be ≥ 0");
        }
        Ok(())
    }

    pub fn goal_tolerance(&self, agent: &AgentState) -> f64 {
        self.goal_tol.unwrap_or(agent.r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    AtGoal,
    Collided,
}

/// Anything with a disk footprint: an agent (by index) or a static obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Body {
    Agent(usize),
    Obstacle(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub body: Body,
    /// Agent id for agents, `None` for obstacles.
    pub id: Option<usize>,
    pub obs: NeighborObs,
}

impl Neighbor {
    pub fn linkable(&self) -> bool {
        self.id.is_some()
    }
}

/// Everything an agent senses without communicating.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub ego: EgoInput,
    pub ego_token: NeighborObs,
    pub neighbors: Vec<Neighbor>,
}

/// Per-agent sets of requested neighbor ids, indexed by agent index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkDecisions {
    pub requests: Vec<Vec<usize>>,
}

impl LinkDecisions {
    pub fn none(n_agents: usize) -> Self {
        LinkDecisions { requests: vec![Vec::new(); n_agents] }
    }

    pub fn count(&self, agent_index: usize) -> usize {
        self.requests.get(agent_index).map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentEvents {
    pub reached_goal: bool,
    pub collided: bool,
    /// Clearance to the closest other body (`+∞` when alone).
    pub d_min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Zero for agents that were already inactive.
    pub rewards: Vec<f64>,
    pub events: Vec<AgentEvents>,
    /// Whether the agent was active at the start of the step.
    pub acted: Vec<bool>,
    pub done: bool,
}

/// Per-step reward: goal, collision, and proximity cases, then the link cost.
pub fn reward(events: &AgentEvents, n_links: usize, lambda_comm: f64) -> f64 {
    let base = if events.collided {
        COLLISION_REWARD
    } else if events.reached_goal {
        GOAL_REWARD
    } else if events.d_min < PROXIMITY_MARGIN {
        -0.1 + events.d_min / 2.0
    } else {
        0.0
    };
    base - lambda_comm * n_links as f64
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub agents: Vec<AgentState>,
    pub obstacles: Vec<Obstacle>,
    pub status: Vec<Status>,
    pub t: usize,
    index: HashMap<usize, usize>,
}

impl World {
    pub fn new(config: WorldConfig, agents: Vec<AgentState>, obstacles: Vec<Obstacle>) -> Result<Self> {
        config.validate()?;
        let mut index = HashMap::new();
        for (k, a) in agents.iter().enumerate() {
            a.validate().map_err(Error::Config)?;
            if index.insert(a.id, k).is_some() {
                return Err(Error::Config(format!("duplicate agent id {}", a.id)));
            }
        }
        if let Some(o) = obstacles.iter().find(|o| !(o.radius > 0.0) || !o.center.is_finite()) {
            return Err(Error::Config(format!("invalid obstacle {o:?}")));
        }
        let status = vec![Status::Active; agents.len()];
        Ok(World { config, agents, obstacles, status, t: 0, index })
    }

    pub fn index_of(&self, id: usize) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownAgent(id))
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.status[k] == Status::Active
    }

    pub fn n_active(&self) -> usize {
        self.status.iter().filter(|s| **s == Status::Active).count()
    }

    pub fn done(&self) -> bool {
        self.n_active() == 0 || self.t >= self.config.t_max
    }

    fn body_disk(&self, b: Body) -> (Vec2, f64) {
        match b {
            Body::Agent(k) => (self.agents[k].p, self.agents[k].r),
            Body::Obstacle(k) => (self.obstacles[k].center, self.obstacles[k].radius),
        }
    }

    fn bodies(&self) -> impl Iterator<Item = Body> + '_ {
        (0..self.agents.len()).map(Body::Agent).chain((0..self.obstacles.len()).map(Body::Obstacle))
    }

    /// Ids of the agents strictly within `r_neighbor` of agent `id`.
    pub fn neighbors(&self, id: usize) -> Result<Vec<usize>> {
        let k = self.index_of(id)?;
        Ok(self
            .neighbor_bodies(k)
            .into_iter()
            .filter_map(|b| match b {
                Body::Agent(j) => Some(self.agents[j].id),
                Body::Obstacle(_) => None,
            })
            .collect())
    }

    fn neighbor_bodies(&self, k: usize) -> Vec<Body> {
        let p = self.agents[k].p;
        let r2 = self.config.r_neighbor * self.config.r_neighbor;
        self.bodies()
            .filter(|&b| b != Body::Agent(k))
            .filter(|&b| (self.body_disk(b).0 - p).norm_sq() < r2)
            .collect()
    }

    /// Ego input, ego token, and ego-frame observations of every body
    /// within sensing range of agent index `k`.
    pub fn observe(&self, k: usize) -> Observation {
        let ego = &self.agents[k];
        let frame = ego_frame(ego);
        let neighbors = self
            .neighbor_bodies(k)
            .into_iter()
            .map(|b| match b {
                Body::Agent(j) => {
                    let a = &self.agents[j];
                    Neighbor { body: b, id: Some(a.id), obs: observe_body(ego, &frame, a.p, a.v, a.r) }
                }
                Body::Obstacle(j) => {
                    let o = &self.obstacles[j];
                    Neighbor { body: b, id: None, obs: observe_body(ego, &frame, o.center, Vec2::ZERO, o.radius) }
                }
            })
            .collect();
        Observation { ego: ego_input(ego), ego_token: ego_self_obs(ego), neighbors }
    }

    /// Delivers each requested neighbor's hidden state, paired with its
    /// observation. Requests outside sensing range or to unknown ids fail.
    pub fn exchange(&self, links: &LinkDecisions) -> Result<Vec<Vec<(NeighborObs, HiddenState)>>> {
        if links.requests.len() != self.agents.len() {
            return Err(Error::Config(format!(
                "link decisions cover {} agents, world has {}",
                links.requests.len(),
                self.agents.len()
            )));
        }
        let r2 = self.config.r_neighbor * self.config.r_neighbor;
        let mut out = Vec::with_capacity(self.agents.len());
        for (k, reqs) in links.requests.iter().enumerate() {
            let ego = &self.agents[k];
            let frame = ego_frame(ego);
            let mut replies = Vec::with_capacity(reqs.len());
            for &to in reqs {
                let j = self.index_of(to).map_err(|_| Error::NotNeighbor { from: ego.id, to })?;
                let nb = &self.agents[j];
                if j == k || (nb.p - ego.p).norm_sq() >= r2 {
                    return Err(Error::NotNeighbor { from: ego.id, to });
                }
                replies.push((observe_body(ego, &frame, nb.p, nb.v, nb.r), nb.hidden()));
            }
            out.push(replies);
        }
        Ok(out)
    }

    /// Advances one step. `actions[k]` must be `Some` exactly for active
    /// agents; `links` supplies the per-agent link counts for the reward.
    pub fn step(&mut self, actions: &[Option<Action>], links: &LinkDecisions) -> Result<StepOutcome> {
        let n = self.agents.len();
        if actions.len() != n {
            return Err(Error::Config(format!("{} actions for {} agents", actions.len(), n)));
        }
        for (k, a) in actions.iter().enumerate() {
            let id = self.agents[k].id;
            match (self.is_active(k), a) {
                (true, None) => return Err(Error::MissingAction(id)),
                (false, Some(_)) => return Err(Error::InactiveAgent(id)),
                (true, Some(a)) => {
                    let v_pref = self.agents[k].v_pref;
                    if !(a.speed >= 0.0 && a.speed <= v_pref + 1e-9) || !a.psi_cmd.is_finite() {
                        return Err(Error::InvalidAction {
                            id,
                            reason: format!("speed {} outside [0, {v_pref}]", a.speed),
                        });
                    }
                }
                (false, None) => {}
            }
        }

        let acted: Vec<bool> = (0..n).map(|k| self.is_active(k)).collect();
        let dt = self.config.dt;
        let max_dpsi = self.config.max_dpsi;
        for (k, a) in actions.iter().enumerate() {
            let Some(a) = a else { continue };
            let agent = &mut self.agents[k];
            let turn = wrap_angle(a.psi_cmd - agent.psi).clamp(-max_dpsi, max_dpsi);
            agent.psi = wrap_angle(agent.psi + turn);
            let speed = a.speed.min(agent.v_pref);
            agent.v = Vec2::from_angle(agent.psi) * speed;
            agent.p += agent.v * dt;
        }
        self.t += 1;

        let mut events = vec![AgentEvents { d_min: f64::INFINITY, ..Default::default() }; n];
        for (a, b) in self.detect_collisions() {
            for body in [a, b] {
                if let Body::Agent(k) = body {
                    if acted[k] {
                        events[k].collided = true;
                    }
                }
            }
        }
        for k in (0..n).filter(|&k| acted[k]) {
            events[k].d_min = self.min_clearance(k);
            if events[k].collided {
                self.status[k] = Status::Collided;
                self.agents[k].v = Vec2::ZERO;
            } else if self.agents[k].goal_distance() <= self.config.goal_tolerance(&self.agents[k]) {
                events[k].reached_goal = true;
                self.status[k] = Status::AtGoal;
                self.agents[k].v = Vec2::ZERO;
            }
        }
        let rewards = (0..n)
            .map(|k| if acted[k] { reward(&events[k], links.count(k), self.config.lambda_comm) } else { 0.0 })
            .collect();
        Ok(StepOutcome { rewards, events, acted, done: self.done() })
    }

    fn min_clearance(&self, k: usize) -> f64 {
        let (p, r) = (self.agents[k].p, self.agents[k].r);
        self.bodies()
            .filter(|&b| b != Body::Agent(k))
            .map(|b| {
                let (q, rq) = self.body_disk(b);
                (q - p).norm() - r - rq
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// All unordered body pairs whose disks overlap (center distance below
    /// the radius sum), found with a uniform grid. Obstacle–obstacle pairs
    /// are skipped. Pairs are returned sorted.
    pub fn detect_collisions(&self) -> Vec<(Body, Body)> {
        let bodies: Vec<Body> = self.bodies().collect();
        let max_r = bodies.iter().map(|&b| self.body_disk(b).1).fold(0.0, f64::max);
        if bodies.len() < 2 || max_r <= 0.0 {
            return Vec::new();
        }
        let cell = 2.0 * max_r;
        let key = |p: Vec2| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &b) in bodies.iter().enumerate() {
            grid.entry(key(self.body_disk(b).0)).or_default().push(i);
        }
        let mut pairs = Vec::new();
        for (i, &a) in bodies.iter().enumerate() {
            let (pa, ra) = self.body_disk(a);
            let (cx, cy) = key(pa);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(cands) = grid.get(&(cx + dx, cy + dy)) else { continue };
                    for &j in cands.iter().filter(|&&j| j > i) {
                        let b = bodies[j];
                        if matches!((a, b), (Body::Obstacle(_), Body::Obstacle(_))) {
                            continue;
                        }
                        let (pb, rb) = self.body_disk(b);
                        if (pa - pb).norm() < ra + rb {
                            pairs.push((a, b));
                        }
                    }
                }
            }
        }
        pairs.sort();
        pairs
    }
}
