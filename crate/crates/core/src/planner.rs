//! Turning a world snapshot into actions and link requests, and running
//! whole episodes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episode::{EpisodeLog, EpisodeMeta, NeighborRecord, StepRecord};
use crate::error::Result;
use crate::orca::{orca_actions, OrcaConfig};
use crate::policy::{act, decide_links, AgentInput, Mode, Policy};
use crate::sim::{LinkDecisions, World};
use crate::state::{comm_state, Action};

/// One agent's decision at one step, with everything training needs.
#[derive(Clone, Debug)]
pub struct AgentStep {
    /// Network input with the granted links' communicated states filled in.
    pub input: AgentInput,
    pub p_link: Vec<f64>,
    /// Gumbel noise behind each link decision (zeros in greedy mode).
    pub noise: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
    pub value: f64,
    pub action_index: usize,
    pub action: Action,
}

/// Decisions for every agent of one world.
#[derive(Clone, Debug)]
pub struct Plan {
    pub actions: Vec<Option<Action>>,
    pub links: LinkDecisions,
    /// Per agent: sensed agents with link probability and decision.
    pub neighbors: Vec<Vec<NeighborRecord>>,
    /// Per agent, present for active agents under a learned policy.
    pub steps: Vec<Option<AgentStep>>,
}

/// Runs the policy for every active agent of every world in one batch.
/// `rngs[w]` drives world `w`'s link and action draws, in agent order, so
/// results do not depend on how worlds are batched.
pub fn policy_plans(policy: &Policy, worlds: &[&World], rngs: &mut [ChaCha8Rng], mode: Mode) -> Result<Vec<Plan>> {
    assert_eq!(worlds.len(), rngs.len(), "one rng per world");
    let mut slots: Vec<(usize, usize)> = Vec::new();
    let mut inputs: Vec<AgentInput> = Vec::new();
    for (w, world) in worlds.iter().enumerate() {
        for k in (0..world.agents.len()).filter(|&k| world.is_active(k)) {
            slots.push((w, k));
            inputs.push(AgentInput::from_observation(&world.observe(k)));
        }
    }
    let probs = if inputs.is_empty() {
        Vec::new()
    } else {
        policy.link_probs(&inputs.iter().collect::<Vec<_>>())?
    };

    let mut plans: Vec<Plan> = worlds
        .iter()
        .map(|w| {
            let n = w.agents.len();
            Plan {
                actions: vec![None; n],
                links: LinkDecisions::none(n),
                neighbors: vec![Vec::new(); n],
                steps: vec![None; n],
            }
        })
        .collect();
    let mut noises = Vec::with_capacity(inputs.len());
    for (s, &(w, k)) in slots.iter().enumerate() {
        let (linked, noise) = decide_links(&probs[s], mode, &mut rngs[w]);
        let cands = &inputs[s].candidates;
        plans[w].links.requests[k] = cands.iter().zip(&linked).filter(|(_, &l)| l).map(|(c, _)| c.id).collect();
        plans[w].neighbors[k] = cands
            .iter()
            .zip(&linked)
            .zip(&probs[s])
            .map(|((c, &link), &p)| NeighborRecord { id: c.id, p_rel: c.obs.p_rel, d_a: c.obs.d_a, p_link: Some(p), link })
            .collect();
        noises.push(noise);
    }
    for (w, world) in worlds.iter().enumerate() {
        let replies = world.exchange(&plans[w].links)?;
        for (s, &(ws, k)) in slots.iter().enumerate() {
            if ws != w {
                continue;
            }
            let ego = &world.agents[k];
            for (id, (_, hidden)) in plans[w].links.requests[k].iter().zip(&replies[k]) {
                let cand = inputs[s].candidates.iter_mut().find(|c| c.id == *id).expect("requested candidate");
                cand.comm = Some(comm_state(ego, hidden));
            }
        }
    }
    let evals = if inputs.is_empty() {
        Vec::new()
    } else {
        policy.evaluate(&inputs.iter().collect::<Vec<_>>())?
    };
    for (s, ((input, (action_probs, value)), noise)) in inputs.into_iter().zip(evals).zip(noises).enumerate() {
        let (w, k) = slots[s];
        let agent = &worlds[w].agents[k];
        let (action_index, action) =
            act(&action_probs, mode, &mut rngs[w], &policy.config.action_set, agent.psi, agent.v_pref);
        plans[w].actions[k] = Some(action);
        plans[w].steps[k] = Some(AgentStep {
            input,
            p_link: probs[s].clone(),
            noise,
            probs: action_probs,
            value,
            action_index,
            action,
        });
    }
    Ok(plans)
}

/// Anything that can drive every agent of a world.
pub trait Planner: Sync {
    fn name(&self) -> String;
    fn plan(&self, world: &World, rng: &mut ChaCha8Rng) -> Result<Plan>;
}

pub struct PolicyPlanner {
    pub policy: Policy,
    pub mode: Mode,
}

impl Planner for PolicyPlanner {
    fn name(&self) -> String {
        match self.mode {
            Mode::Greedy => "policy".into(),
            Mode::Sample => "policy-sampled".into(),
        }
    }

    fn plan(&self, world: &World, rng: &mut ChaCha8Rng) -> Result<Plan> {
        let mut plans = policy_plans(&self.policy, &[world], std::slice::from_mut(rng), self.mode)?;
        Ok(plans.remove(0))
    }
}

pub struct OrcaPlanner {
    pub config: OrcaConfig,
}

impl Planner for OrcaPlanner {
    fn name(&self) -> String {
        "orca".into()
    }

    fn plan(&self, world: &World, _rng: &mut ChaCha8Rng) -> Result<Plan> {
        let n = world.agents.len();
        let neighbors = (0..n)
            .map(|k| {
                if !world.is_active(k) {
                    return Vec::new();
                }
                world
                    .observe(k)
                    .neighbors
                    .iter()
                    .filter_map(|nb| {
                        nb.id.map(|id| NeighborRecord { id, p_rel: nb.obs.p_rel, d_a: nb.obs.d_a, p_link: None, link: false })
                    })
                    .collect()
            })
            .collect();
        Ok(Plan {
            actions: orca_actions(world, &self.config),
            links: LinkDecisions::none(n),
            neighbors,
            steps: vec![None; n],
        })
    }
}

/// Runs `world` to completion under `planner`, logging every step.
pub fn run_episode(mut world: World, planner: &dyn Planner, scenario: &str, seed: u64) -> Result<EpisodeLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = EpisodeMeta {
        record: "meta".into(),
        scenario: scenario.into(),
        planner: planner.name(),
        seed,
        config: world.config.clone(),
        ids: world.agents.iter().map(|a| a.id).collect(),
        radii: world.agents.iter().map(|a| a.r).collect(),
        v_pref: world.agents.iter().map(|a| a.v_pref).collect(),
        goals: world.agents.iter().map(|a| a.g).collect(),
        obstacles: world.obstacles.clone(),
    };
    let mut records = Vec::new();
    while !world.done() {
        let plan = planner.plan(&world, &mut rng)?;
        let before: Vec<_> = world.agents.iter().map(|a| (a.p, a.v, a.psi)).collect();
        let t = world.t;
        let outcome = world.step(&plan.actions, &plan.links)?;
        for (k, (p, v, psi)) in before.into_iter().enumerate() {
            records.push(StepRecord {
                t,
                agent: k,
                p,
                v,
                psi,
                action: plan.actions[k],
                reward: outcome.rewards[k],
                links: plan.links.requests[k].clone(),
                status: world.status[k],
                neighbors: plan.neighbors[k].clone(),
            });
        }
    }
    for (k, a) in world.agents.iter().enumerate() {
        records.push(StepRecord {
            t: world.t,
            agent: k,
            p: a.p,
            v: a.v,
            psi: a.psi,
            action: None,
            reward: 0.0,
            links: Vec::new(),
            status: world.status[k],
            neighbors: Vec::new(),
        });
    }
    Ok(EpisodeLog { meta, records })
}
