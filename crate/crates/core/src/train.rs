//! Synchronous advantage actor-critic training with a phase curriculum.
//!
//! One update is: every worker world advances `rollout_len` steps under a
//! frozen parameter snapshot, discounted returns are formed per agent, and
//! the surrogate loss is minimized with one Adam step. Link decisions made
//! during the rollout are replayed through the straight-through Gumbel path
//! with their recorded noise, so the loss sees exactly the links that were
//! used.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::{Adam, AdamConfig, Gradients, ParamStore, Tape, Tensor};

use crate::bench::{evaluate, MetricsReport};
use crate::error::{Error, Result};
use crate::planner::{policy_plans, AgentStep, Plan, PolicyPlanner};
use crate::policy::{AgentInput, Links, Mode, Policy, PolicyConfig};
use crate::scenario::{gen_scenario, Family, Geometry, RadiusSpec, Scenario};
use crate::sim::{Status, World, WorldConfig};

/// Finished episodes kept for the running success and return statistics.
const EPISODE_WINDOW: usize = 100;
const RESET_ATTEMPTS: usize = 100;

/// One scenario family a phase draws from, with an inclusive agent range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseScenario {
    pub family: Family,
    pub agents: [usize; 2],
    /// Defaults to the family's standard radius.
    #[serde(default)]
    pub radius: Option<RadiusSpec>,
    #[serde(default)]
    pub geometry: Geometry,
}

impl PhaseScenario {
    pub fn new(family: Family, lo: usize, hi: usize) -> Self {
        PhaseScenario { family, agents: [lo, hi], radius: None, geometry: Geometry::default() }
    }

    fn draw(&self, rng: &mut impl Rng) -> Scenario {
        let n = rng.gen_range(self.agents[0]..=self.agents[1]);
        let mut spec = Scenario::standard(self.family, n, rng.gen());
        if let Some(r) = self.radius {
            spec.radius = r;
        }
        spec.geometry = self.geometry.clone();
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    /// Updates spent in this phase before moving on.
    pub updates: usize,
    pub scenarios: Vec<PhaseScenario>,
}

/// Periodic greedy evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub family: Family,
    pub n_agents: usize,
    /// Exact layouts under a greedy policy are deterministic, so one trial
    /// already equals the 20-trial average there.
    pub trials: usize,
    /// Evaluate every this many updates; 0 disables.
    pub every: usize,
    pub seed: u64,
    pub geometry: Geometry,
    /// Stop training once the evaluated success rate reaches this value.
    pub target_success: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            family: Family::Circle,
            n_agents: 4,
            trials: 1,
            every: 10,
            seed: 0,
            geometry: Geometry::default(),
            target_success: None,
        }
    }
}

impl EvalConfig {
    pub fn scenario(&self) -> Scenario {
        let mut spec = Scenario::standard(self.family, self.n_agents, self.seed);
        spec.geometry = self.geometry.clone();
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name; used for checkpoint file names.
    pub preset: String,
    pub seed: u64,
    pub gamma: f64,
    pub rollout_len: usize,
    pub n_workers: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Weight of the score-function term on link decisions.
    pub link_coef: f64,
    /// Temperature of the relaxed link sample behind the straight-through
    /// gradient.
    pub gumbel_tau: f64,
    /// Global gradient-norm clip; `None` disables.
    pub max_grad_norm: Option<f64>,
    /// Transitions per tape when accumulating the loss gradient.
    pub chunk_size: usize,
    /// Per-link reward cost. Overrides `world.lambda_comm`.
    pub lambda_comm: f64,
    /// Train on the link cost alone, with navigation rewards zeroed.
    pub penalty_only: bool,
    /// Stop once this many environment steps (summed over workers) ran.
    pub max_env_steps: Option<u64>,
    /// Save a checkpoint every this many updates; 0 saves only the last.
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub phases: Vec<Phase>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "dmca".into(),
            seed: 0,
            gamma: 0.97,
            rollout_len: 32,
            n_workers: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            link_coef: 1.0,
            gumbel_tau: 1.0,
            max_grad_norm: None,
            chunk_size: 256,
            lambda_comm: 0.0,
            penalty_only: false,
            max_env_steps: None,
            checkpoint_every: 100,
            eval: EvalConfig::default(),
            world: WorldConfig::default(),
            policy: PolicyConfig::default(),
            phases: default_phases(),
        }
    }
}

/// Phase 1: 2-agent swap and 2–4 agent circles. Phase 2 adds 6–10 agent
/// circles and swaps and random scenarios.
pub fn default_phases() -> Vec<Phase> {
    let phase1 = vec![PhaseScenario::new(Family::Swap, 2, 2), PhaseScenario::new(Family::Circle, 2, 4)];
    let mut phase2 = phase1.clone();
    phase2.extend([
        PhaseScenario::new(Family::Circle, 6, 10),
        PhaseScenario::new(Family::Swap, 6, 10),
        PhaseScenario::new(Family::Random, 2, 10),
    ]);
    vec![
        Phase { name: "phase1".into(), updates: 2000, scenarios: phase1 },
        Phase { name: "phase2".into(), updates: 2000, scenarios: phase2 },
    ]
}

pub const PRESETS: [&str; 2] = ["dmca", "dmca-lc"];

/// Link cost of a named preset.
pub fn preset_lambda(name: &str) -> Result<f64> {
    match name {
        "dmca" => Ok(0.0),
        "dmca-lc" => Ok(1e-4),
        other => Err(Error::Config(format!("unknown preset `{other}` (expected dmca or dmca-lc)"))),
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        TrainConfig::default().with_preset(name)
    }

    /// Sets the preset name and its link cost.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        self.lambda_comm = preset_lambda(name)?;
        self.preset = name.into();
        Ok(self)
    }

    /// Keeps only the first phase.
    pub fn phase1_only(mut self) -> Self {
        self.phases.truncate(1);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.rollout_len == 0 || self.n_workers == 0 || self.chunk_size == 0 {
            return bad("rollout_len, n_workers and chunk_size must be ≥ 1");
        }
        if !(self.lr > 0.0 && self.eps > 0.0) {
            return bad("lr and eps must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.link_coef >= 0.0) {
            return bad("loss weights must be ≥ 0");
        }
        if !(self.gumbel_tau > 0.0) {
            return bad("gumbel_tau must be > 0");
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return bad("max_grad_norm must be > 0");
        }
        if !(self.lambda_comm >= 0.0) {
            return bad("lambda_comm must be ≥ 0");
        }
        if self.penalty_only && self.lambda_comm == 0.0 {
            return bad("penalty_only needs lambda_comm > 0");
        }
        if self.phases.is_empty() {
            return bad("at least one phase is required");
        }
        for phase in &self.phases {
            if phase.scenarios.is_empty() {
                return Err(Error::Config(format!("phase `{}` has no scenarios", phase.name)));
            }
            if phase.scenarios.iter().any(|s| s.agents[0] == 0 || s.agents[0] > s.agents[1]) {
                return Err(Error::Config(format!("phase `{}` has an empty agent range", phase.name)));
            }
        }
        if self.eval.every > 0 && (self.eval.trials == 0 || self.eval.n_agents == 0) {
            return bad("evaluation needs trials ≥ 1 and n_agents ≥ 1");
        }
        self.world_config().validate()?;
        self.policy.validate()
    }

    /// World configuration with the trainer's link cost.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig { lambda_comm: self.lambda_comm, ..self.world.clone() }
    }

    pub fn total_updates(&self) -> usize {
        self.phases.iter().map(|p| p.updates).sum()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// One agent-step of experience.
#[derive(Clone, Debug)]
pub struct Transition {
    /// Network input; granted links carry their communicated state.
    pub input: AgentInput,
    /// Gumbel noise behind each link decision, in candidate order.
    pub noise: Vec<[f64; 2]>,
    /// `p_link` of each candidate under the rollout snapshot.
    pub p_link: Vec<f64>,
    pub action: usize,
    /// Includes the link cost.
    pub reward: f64,
    pub value: f64,
    /// Value of the same input with every link withheld. Baseline of the
    /// link score term: unlike `value`, it does not see the decisions it
    /// judges.
    pub value_no_link: f64,
    /// The agent's episode ended with this step (goal, collision, or time
    /// limit).
    pub done: bool,
}

impl Transition {
    pub fn links(&self) -> impl Iterator<Item = bool> + '_ {
        self.input.candidates.iter().map(|c| c.comm.is_some())
    }

    pub fn n_links(&self) -> usize {
        self.input.n_links()
    }
}

/// Time-ordered experience of one agent slot of one worker. Episodes are
/// separated by `done`.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Value of the state after the last transition; 0 when it was terminal.
    pub bootstrap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub n_agents: usize,
    pub successes: usize,
    pub collisions: usize,
    pub mean_return: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub trajectories: Vec<Trajectory>,
    pub env_steps: u64,
    pub finished: Vec<EpisodeStat>,
}

impl Rollout {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Discounted returns `R_t = r_t + γ·R_{t+1}`, cut at `done`, and
/// advantages `R_t − V(s_t)`.
pub fn returns_and_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "one value and done flag per reward");
    let mut returns = vec![0.0; n];
    let mut next = bootstrap;
    for t in (0..n).rev() {
        if dones[t] {
            next = 0.0;
        }
        next = rewards[t] + gamma * next;
        returns[t] = next;
    }
    let adv = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    (returns, adv)
}

/// Loss components, each already averaged over transitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    /// Mean action entropy (the loss holds `−entropy_coef · entropy`).
    pub entropy: f64,
    pub link: f64,
}

/// One training sample: a transition with its return and advantage.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub transition: &'a Transition,
    pub ret: f64,
    pub advantage: f64,
    /// `R_t − V(s_t with no links)`, for the link score term.
    pub link_advantage: f64,
}

/// Samples of a rollout in trajectory order.
pub fn samples(rollout: &Rollout, gamma: f64) -> Vec<Sample<'_>> {
    let mut out = Vec::with_capacity(rollout.len());
    for traj in &rollout.trajectories {
        let t = &traj.transitions;
        let rewards: Vec<f64> = t.iter().map(|x| x.reward).collect();
        let values: Vec<f64> = t.iter().map(|x| x.value).collect();
        let dones: Vec<bool> = t.iter().map(|x| x.done).collect();
        let (returns, adv) = returns_and_advantages(&rewards, &values, &dones, traj.bootstrap, gamma);
        for (i, tr) in t.iter().enumerate() {
            let link_advantage = returns[i] - tr.value_no_link;
            out.push(Sample { transition: tr, ret: returns[i], advantage: adv[i], link_advantage });
        }
    }
    out
}

/// Weights of the surrogate loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub link_coef: f64,
    pub gumbel_tau: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights {
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
            link_coef: c.link_coef,
            gumbel_tau: c.gumbel_tau,
        }
    }
}

/// Builds the loss of `batch` on `tape`, scaled by `1 / total` so that
/// chunk losses add up to the mean over `total` samples:
///
/// `−log π(a)·Â + value_coef·(R − V)² − entropy_coef·H(π) − link_coef·Σ_j log p(z_j)·Â`
///
/// The last sum runs over the agent's link candidates with their recorded
/// decisions `z_j`. Gates replay those decisions through the
/// straight-through Gumbel estimator.
pub fn loss_on_tape<'p>(
    policy: &Policy,
    store: &'p ParamStore,
    tape: &mut Tape<'p>,
    batch: &[Sample<'_>],
    weights: &LossWeights,
    total: usize,
) -> Result<(tensorgrad::Var, LossParts)> {
    let inputs: Vec<&AgentInput> = batch.iter().map(|s| &s.transition.input).collect();
    let noise_rows: Vec<f64> = batch.iter().flat_map(|s| s.transition.noise.iter().flatten().copied()).collect();
    let n_cand = noise_rows.len() / 2;
    let noise = Tensor::matrix(n_cand, 2, noise_rows)?;
    let links = if n_cand == 0 { Links::Fixed } else { Links::StraightThrough { noise: &noise, tau: weights.gumbel_tau } };
    let vars = policy.forward_batch_with(store, tape, &inputs, links)?;
    let scale = 1.0 / total as f64;
    let b = batch.len();

    let actions: Vec<usize> = batch.iter().map(|s| s.transition.action).collect();
    let adv = tape.constant(Tensor::matrix(b, 1, batch.iter().map(|s| s.advantage).collect())?);
    let logp_a = tape.pick(vars.action_logp, actions)?;
    let pg = tape.mul(logp_a, adv)?;
    let pg = tape.sum(pg);
    let policy_term = tape.scale(pg, -scale);

    let returns = tape.constant(Tensor::matrix(b, 1, batch.iter().map(|s| s.ret).collect())?);
    let err = tape.sub(vars.value, returns)?;
    let sq = tape.square(err);
    let sq = tape.sum(sq);
    let value_term = tape.scale(sq, weights.value_coef * scale);

    let p = tape.exp(vars.action_logp);
    let plogp = tape.mul(p, vars.action_logp)?;
    let neg_entropy = tape.sum(plogp);
    let entropy_term = tape.scale(neg_entropy, weights.entropy_coef * scale);

    let mut total_var = tape.add(policy_term, value_term)?;
    total_var = tape.add(total_var, entropy_term)?;
    let mut link_value = 0.0;
    if let Some(link_logp) = vars.link_logp {
        let mut picks = Vec::with_capacity(n_cand);
        let mut cand_adv = Vec::with_capacity(n_cand);
        for s in batch {
            for linked in s.transition.links() {
                picks.push(if linked { 0 } else { 1 });
                cand_adv.push(s.link_advantage);
            }
        }
        let chosen = tape.pick(link_logp, picks)?;
        let a = tape.constant(Tensor::matrix(n_cand, 1, cand_adv)?);
        let score = tape.mul(chosen, a)?;
        let score = tape.sum(score);
        let link_term = tape.scale(score, -weights.link_coef * scale);
        link_value = tape.value(link_term).item();
        total_var = tape.add(total_var, link_term)?;
    }
    let parts = LossParts {
        total: tape.value(total_var).item(),
        policy: tape.value(policy_term).item(),
        value: tape.value(value_term).item(),
        entropy: -tape.value(neg_entropy).item() * scale,
        link: link_value,
    };
    Ok((total_var, parts))
}

/// Mean loss over `samples` and its gradient, accumulated in chunks.
pub fn loss_and_gradients(
    policy: &Policy,
    samples: &[Sample<'_>],
    weights: &LossWeights,
    chunk_size: usize,
) -> Result<(LossParts, Gradients)> {
    let mut grads = Gradients::zeros_like(&policy.store);
    let mut parts = LossParts::default();
    for chunk in samples.chunks(chunk_size.max(1)) {
        let mut tape = Tape::new();
        let (loss, p) = loss_on_tape(policy, &policy.store, &mut tape, chunk, weights, samples.len())?;
        tape.backward_into(loss, &mut grads)?;
        parts.total += p.total;
        parts.policy += p.policy;
        parts.value += p.value;
        parts.entropy += p.entropy;
        parts.link += p.link;
    }
    Ok((parts, grads))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: usize,
    pub phase: String,
    /// Environment steps so far, summed over workers.
    pub env_steps: u64,
    /// Per-agent episode return over the last finished episodes.
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub collision_rate: Option<f64>,
    /// Granted links per agent per step in this update's rollout.
    pub mean_links: f64,
    /// Mean `p_link` over all link candidates in this update's rollout.
    pub mean_p_link: Option<f64>,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub eval_success: Option<f64>,
    pub eval_collision: Option<f64>,
    pub eval_links: Option<f64>,
}

struct Worker {
    world: World,
    /// Drives scenario resets.
    scenario_rng: ChaCha8Rng,
    returns: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub updates: usize,
    pub env_steps: u64,
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// `(update, env_steps)` when the evaluation target was first met.
    pub reached_target: Option<(usize, u64)>,
    pub last_eval: Option<MetricsReport>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    optimizer: Adam,
    workers: Vec<Worker>,
    /// Action and link draws, one stream per worker.
    rngs: Vec<ChaCha8Rng>,
    phase: usize,
    phase_updates: usize,
    pub update: usize,
    pub env_steps: u64,
    recent: VecDeque<EpisodeStat>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = Policy::new(config.policy.clone(), &mut init_rng)?;
        Self::with_policy(config, policy)
    }

    /// Starts from an existing policy; its architecture replaces
    /// `config.policy`.
    pub fn with_policy(mut config: TrainConfig, policy: Policy) -> Result<Self> {
        config.policy = policy.config.clone();
        config.validate()?;
        let optimizer = Adam::new(&policy.store, config.adam());
        let world_config = config.world_config();
        let mut workers = Vec::with_capacity(config.n_workers);
        let mut rngs = Vec::with_capacity(config.n_workers);
        for w in 0..config.n_workers as u64 {
            let mut scenario_rng = ChaCha8Rng::seed_from_u64(config.seed);
            scenario_rng.set_stream(2 * w + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(2 * w + 2);
            let world = reset_world(&config.phases[0], &world_config, &mut scenario_rng)?;
            let returns = vec![0.0; world.agents.len()];
            workers.push(Worker { world, scenario_rng, returns });
            rngs.push(rng);
        }
        Ok(Trainer {
            config,
            policy,
            optimizer,
            workers,
            rngs,
            phase: 0,
            phase_updates: 0,
            update: 0,
            env_steps: 0,
            recent: VecDeque::new(),
        })
    }

    pub fn phase_name(&self) -> &str {
        &self.config.phases[self.phase].name
    }

    pub fn finished(&self) -> bool {
        let steps_done = matches!(self.config.max_env_steps, Some(m) if self.env_steps >= m);
        steps_done || self.update >= self.config.total_updates()
    }

    /// Runs every worker for `rollout_len` steps under the current
    /// parameters. Worlds that finish are reset from the current phase.
    pub fn rollout(&mut self) -> Result<Rollout> {
        let cfg = &self.config;
        let world_config = cfg.world_config();
        let phase = &cfg.phases[self.phase];
        let slots = |w: &Worker| w.world.agents.len();
        let mut trajectories: Vec<Vec<Trajectory>> =
            self.workers.iter().map(|w| vec![Trajectory::default(); slots(w)]).collect();
        let mut rollout = Rollout::default();
        for _ in 0..cfg.rollout_len {
            let worlds: Vec<&World> = self.workers.iter().map(|w| &w.world).collect();
            let plans = policy_plans(&self.policy, &worlds, &mut self.rngs, Mode::Sample)?;
            let mut no_link = no_link_values(&self.policy, &plans)?.into_iter();
            for (w, plan) in plans.into_iter().enumerate() {
                let worker = &mut self.workers[w];
                let outcome = worker.world.step(&plan.actions, &plan.links)?;
                rollout.env_steps += 1;
                for (k, step) in plan.steps.into_iter().enumerate() {
                    let Some(AgentStep { input, p_link, noise, value, action_index, .. }) = step else {
                        continue;
                    };
                    let reward = if cfg.penalty_only {
                        -cfg.lambda_comm * input.n_links() as f64
                    } else {
                        outcome.rewards[k]
                    };
                    worker.returns[k] += reward;
                    let done = outcome.done || !worker.world.is_active(k);
                    if trajectories[w].len() <= k {
                        trajectories[w].resize(k + 1, Trajectory::default());
                    }
                    let value_no_link = if input.n_links() > 0 { no_link.next().expect("one per linked agent") } else { value };
                    trajectories[w][k].transitions.push(Transition {
                        input,
                        noise,
                        p_link,
                        action: action_index,
                        reward,
                        value,
                        value_no_link,
                        done,
                    });
                }
                if outcome.done {
                    rollout.finished.push(episode_stat(&worker.world, &worker.returns));
                    worker.world = reset_world(phase, &world_config, &mut worker.scenario_rng)?;
                    worker.returns = vec![0.0; worker.world.agents.len()];
                }
            }
        }
        self.bootstrap(&mut trajectories)?;
        rollout.trajectories = trajectories.into_iter().flatten().filter(|t| !t.transitions.is_empty()).collect();
        Ok(rollout)
    }

    /// Values of the states that follow each unfinished trajectory, with
    /// greedy links so that no random draws are consumed.
    fn bootstrap(&self, trajectories: &mut [Vec<Trajectory>]) -> Result<()> {
        let worlds: Vec<&World> = self.workers.iter().map(|w| &w.world).collect();
        let mut rngs = self.rngs.clone();
        let plans = policy_plans(&self.policy, &worlds, &mut rngs, Mode::Greedy)?;
        for (w, plan) in plans.iter().enumerate() {
            for (k, traj) in trajectories[w].iter_mut().enumerate() {
                let open = traj.transitions.last().is_some_and(|t| !t.done);
                if open {
                    let step = plan.steps.get(k).and_then(|s| s.as_ref());
                    traj.bootstrap = step.map(|s| s.value).unwrap_or(0.0);
                }
            }
        }
        Ok(())
    }

    /// Applies one optimizer step on `rollout`.
    pub fn learn(&mut self, rollout: &Rollout) -> Result<(LossParts, f64)> {
        let weights = LossWeights::from(&self.config);
        let samples = samples(rollout, self.config.gamma);
        if samples.is_empty() {
            return Ok((LossParts::default(), 0.0));
        }
        let (parts, mut grads) = loss_and_gradients(&self.policy, &samples, &weights, self.config.chunk_size)?;
        let norm = grads.global_norm();
        if !parts.total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "update {}: loss {:?}, gradient norm {norm}",
                self.update, parts
            )));
        }
        if let Some(clip) = self.config.max_grad_norm {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.optimizer.step(&mut self.policy.store, &grads)?;
        Ok((parts, norm))
    }

    /// Greedy evaluation of the current policy.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let planner = PolicyPlanner { policy: self.policy.clone(), mode: Mode::Greedy };
        let spec = self.config.eval.scenario();
        let (report, _) = evaluate(&planner, &spec, self.config.eval.trials, &self.config.world_config())?;
        Ok(report)
    }

    /// One rollout and one update.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let rollout = self.rollout()?;
        let (loss, grad_norm) = self.learn(&rollout)?;
        self.update += 1;
        self.env_steps += rollout.env_steps;
        for stat in &rollout.finished {
            self.recent.push_back(stat.clone());
            if self.recent.len() > EPISODE_WINDOW {
                self.recent.pop_front();
            }
        }
        let agent_steps = rollout.len();
        let links: usize = rollout.transitions().map(|t| t.n_links()).sum();
        let p_links: Vec<f64> = rollout.transitions().flat_map(|t| t.p_link.iter().copied()).collect();
        let agents: usize = self.recent.iter().map(|e| e.n_agents).sum();
        let rate = |f: fn(&EpisodeStat) -> usize| {
            (agents > 0).then(|| self.recent.iter().map(f).sum::<usize>() as f64 / agents as f64)
        };
        let mean_return = (agents > 0).then(|| {
            self.recent.iter().map(|e| e.mean_return * e.n_agents as f64).sum::<f64>() / agents as f64
        });
        let mut record = MetricsRecord {
            update: self.update,
            phase: self.phase_name().to_string(),
            env_steps: self.env_steps,
            mean_return,
            success_rate: rate(|e| e.successes),
            collision_rate: rate(|e| e.collisions),
            mean_links: if agent_steps > 0 { links as f64 / agent_steps as f64 } else { 0.0 },
            mean_p_link: (!p_links.is_empty()).then(|| p_links.iter().sum::<f64>() / p_links.len() as f64),
            loss,
            grad_norm,
            eval_success: None,
            eval_collision: None,
            eval_links: None,
        };
        let every = self.config.eval.every;
        if every > 0 && self.update % every == 0 {
            let report = self.evaluate()?;
            record.eval_success = Some(report.success_rate);
            record.eval_collision = Some(report.collision_rate);
            record.eval_links = Some(report.mean_links_per_agent_step);
        }
        self.advance_phase()?;
        Ok(record)
    }

    fn advance_phase(&mut self) -> Result<()> {
        self.phase_updates += 1;
        let budget = self.config.phases[self.phase].updates;
        if self.phase_updates >= budget && self.phase + 1 < self.config.phases.len() {
            self.phase += 1;
            self.phase_updates = 0;
            let world_config = self.config.world_config();
            for worker in &mut self.workers {
                worker.world = reset_world(&self.config.phases[self.phase], &world_config, &mut worker.scenario_rng)?;
                worker.returns = vec![0.0; worker.world.agents.len()];
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_{}.ckpt", self.config.preset, self.update))
    }

    /// Trains until the phase budget, the step budget, or the evaluation
    /// target is exhausted. With `out_dir`, writes `config.toml`,
    /// `metrics.jsonl`, and checkpoints there. `on_record` sees every
    /// metrics record as it is produced.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_record: impl FnMut(&MetricsRecord)) -> Result<TrainSummary> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("config.toml"), self.config.to_toml())?;
                Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
            }
            None => None,
        };
        let mut summary = TrainSummary::default();
        while !self.finished() {
            let record = match self.step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out_dir {
                        let dump = dir.join(format!("{}_{}_nonfinite.ckpt", self.config.preset, self.update));
                        self.policy.save(&dump)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &record).map_err(|e| Error::Config(e.to_string()))?;
                writeln!(w)?;
                w.flush()?;
            }
            on_record(&record);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.update % every == 0 {
                    let path = self.checkpoint_path(dir);
                    self.policy.save(&path)?;
                    summary.checkpoints.push(path);
                }
            }
            let hit = matches!((record.eval_success, self.config.eval.target_success), (Some(s), Some(t)) if s >= t);
            summary.records.push(record);
            if hit {
                summary.reached_target = Some((self.update, self.env_steps));
                break;
            }
        }
        if let Some(dir) = out_dir {
            let path = self.checkpoint_path(dir);
            if summary.checkpoints.last() != Some(&path) {
                self.policy.save(&path)?;
                summary.checkpoints.push(path);
            }
        }
        summary.updates = self.update;
        summary.env_steps = self.env_steps;
        if self.config.eval.every > 0 {
            summary.last_eval = Some(self.evaluate()?);
        }
        Ok(summary)
    }
}

/// Trains a fresh policy from `config`.
pub fn train(config: TrainConfig, out_dir: Option<&Path>) -> Result<(Policy, TrainSummary)> {
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run(out_dir, |_| {})?;
    Ok((trainer.policy, summary))
}

/// Values of the linked agents' inputs with their links withheld, in plan
/// and agent order.
fn no_link_values(policy: &Policy, plans: &[Plan]) -> Result<Vec<f64>> {
    let stripped: Vec<AgentInput> = plans
        .iter()
        .flat_map(|p| p.steps.iter().flatten())
        .filter(|s| s.input.n_links() > 0)
        .map(|s| {
            let mut input = s.input.clone();
            input.candidates.iter_mut().for_each(|c| c.comm = None);
            input
        })
        .collect();
    if stripped.is_empty() {
        return Ok(Vec::new());
    }
    Ok(policy.evaluate(&stripped.iter().collect::<Vec<_>>())?.into_iter().map(|(_, v)| v).collect())
}

fn reset_world(phase: &Phase, config: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let mut last = None;
    for _ in 0..RESET_ATTEMPTS {
        let pick = rng.gen_range(0..phase.scenarios.len());
        let spec = phase.scenarios[pick].draw(rng);
        match gen_scenario(&spec, config) {
            Ok(world) => return Ok(world),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Scenario("no scenario".into())))
}

fn episode_stat(world: &World, returns: &[f64]) -> EpisodeStat {
    let n = world.agents.len();
    let count = |s: Status| world.status.iter().filter(|&&x| x == s).count();
    EpisodeStat {
        n_agents: n,
        successes: count(Status::AtGoal),
        collisions: count(Status::Collided),
        mean_return: returns.iter().sum::<f64>() / n.max(1) as f64,
    }
}
