#![allow(dead_code)]

use dmca::policy::{candidate_order, AgentInput, Links, Policy, PolicyConfig};
use dmca::episode::{EpisodeLog, EpisodeMeta, StepRecord};
use dmca::sim::{Body, Obstacle, Status, World, WorldConfig};
use dmca::state::{Action, AgentState, CommState, NeighborObs, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::gradcheck::{GradCheck, GradCheckReport};
use tensorgrad::gumbel::gumbel_noise;
use tensorgrad::{ParamStore, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec2 {
    Vec2::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))
}

/// Agent with a random pose, goal, velocity and radius. Positions may
/// overlap.
pub fn random_agent(rng: &mut impl Rng, id: usize, extent: f64) -> AgentState {
    let mut a = AgentState::new(id, random_vec(rng, extent), random_vec(rng, extent), rng.gen_range(0.1..0.5), rng.gen_range(0.5..1.5));
    a.psi = rng.gen_range(-3.1..3.1);
    a.v = Vec2::from_angle(a.psi) * rng.gen_range(0.0..a.v_pref);
    a
}

pub fn random_world(rng: &mut impl Rng, n: usize, n_obstacles: usize, extent: f64) -> World {
    let agents = (0..n).map(|k| random_agent(rng, k, extent)).collect();
    let obstacles = (0..n_obstacles)
        .map(|_| Obstacle { center: random_vec(rng, extent), radius: rng.gen_range(0.1..0.6) })
        .collect();
    World::new(WorldConfig::default(), agents, obstacles).unwrap()
}

/// Every overlapping body pair by exhaustive comparison, obstacle pairs
/// excluded, sorted.
pub fn brute_force_collisions(world: &World) -> Vec<(Body, Body)> {
    let mut bodies: Vec<(Body, Vec2, f64)> =
        world.agents.iter().enumerate().map(|(k, a)| (Body::Agent(k), a.p, a.r)).collect();
    bodies.extend(world.obstacles.iter().enumerate().map(|(k, o)| (Body::Obstacle(k), o.center, o.radius)));
    let mut out = Vec::new();
    for i in 0..bodies.len() {
        for j in i + 1..bodies.len() {
            let (a, pa, ra) = bodies[i];
            let (b, pb, rb) = bodies[j];
            if matches!((a, b), (Body::Obstacle(_), Body::Obstacle(_))) {
                continue;
            }
            let d = ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
            if d < ra + rb {
                out.push(if a < b { (a, b) } else { (b, a) });
            }
        }
    }
    out.sort();
    out
}

pub fn random_obs(rng: &mut impl Rng) -> NeighborObs {
    let p_rel = random_vec(rng, 3.0);
    let r_j = rng.gen_range(0.1..0.5);
    NeighborObs { p_rel, v_rel: random_vec(rng, 1.0), r_j, d_a: p_rel.norm(), r_sum: r_j + 0.2 }
}

pub fn random_comm(rng: &mut impl Rng) -> CommState {
    CommState { d_goal_j: rng.gen_range(0.0..6.0), dv_pref: rng.gen_range(-0.5..0.5), dpsi: rng.gen_range(-3.0..3.0) }
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

/// `x·W + b` by explicit loops.
pub fn loop_dense(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    (0..w.cols()).map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn loop_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// One LSTM step written out gate by gate (order i, f, g, o).
pub fn loop_lstm_step(store: &ParamStore, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let wi = param(store, "lstm.weight_ih");
    let wh = param(store, "lstm.weight_hh");
    let b = param(store, "lstm.bias");
    let hd = h.len();
    let pre = |j: usize| {
        b.data()[j]
            + (0..x.len()).map(|i| x[i] * wi.get(i, j)).sum::<f64>()
            + (0..hd).map(|i| h[i] * wh.get(i, j)).sum::<f64>()
    };
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for u in 0..hd {
        let i = sigmoid(pre(u));
        let f = sigmoid(pre(hd + u));
        let g = pre(2 * hd + u).tanh();
        let o = sigmoid(pre(3 * hd + u));
        c2[u] = f * c[u] + i * g;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}

/// `e_c` oracle: LSTM over the pairs in the given order.
pub fn loop_aggregate(store: &ParamStore, pairs: &[(NeighborObs, CommState)], hidden: usize) -> Vec<f64> {
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for (obs, comm) in pairs {
        let mut x = obs.to_array().to_vec();
        x.extend(comm.to_array());
        (h, c) = loop_lstm_step(store, &x, &h, &c);
    }
    h
}

/// Ego-row multi-head attention written per head with explicit loops.
pub fn loop_encoder(policy: &Policy, ego: &NeighborObs, tokens: &[NeighborObs]) -> Vec<f64> {
    let store = &policy.store;
    let cfg = &policy.config;
    let mut seq = vec![ego.to_array().to_vec()];
    seq.extend(tokens.iter().map(|t| t.to_array().to_vec()));
    let q = loop_dense(store, "encoder.query", &seq[0]);
    let ks: Vec<Vec<f64>> = seq.iter().map(|x| loop_dense(store, "encoder.key", x)).collect();
    let vs: Vec<Vec<f64>> = seq.iter().map(|x| loop_dense(store, "encoder.value", x)).collect();
    let mut pooled = Vec::with_capacity(cfg.heads * cfg.value_dim);
    for h in 0..cfg.heads {
        let qh = &q[h * cfg.key_dim..(h + 1) * cfg.key_dim];
        let scores: Vec<f64> = ks
            .iter()
            .map(|k| {
                let kh = &k[h * cfg.key_dim..(h + 1) * cfg.key_dim];
                qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() / (cfg.key_dim as f64).sqrt()
            })
            .collect();
        let w = loop_softmax(&scores);
        for d in 0..cfg.value_dim {
            pooled.push(w.iter().zip(&vs).map(|(wi, v)| wi * v[h * cfg.value_dim + d]).sum());
        }
    }
    loop_dense(store, "encoder.output", &pooled)
}

/// Whole-network oracle for one agent: returns (action probabilities,
/// value). Granted links are those with a communicated state.
pub fn loop_forward(policy: &Policy, input: &AgentInput) -> (Vec<f64>, f64) {
    let store = &policy.store;
    let cfg = &policy.config;
    let e_o = loop_encoder(policy, &input.ego_token, &input.tokens);
    let mut pairs: Vec<(NeighborObs, CommState)> =
        input.candidates.iter().filter_map(|c| c.comm.map(|m| (c.obs, m))).collect();
    pairs.sort_by(|a, b| candidate_order(&a.0, &b.0));
    let e_c = loop_aggregate(store, &pairs, cfg.lstm_hidden);
    let mut x = input.ego.to_array().to_vec();
    x.extend(e_o);
    x.extend(e_c);
    for i in 0..cfg.nav_hidden.len() {
        x = relu(loop_dense(store, &format!("nav.{i}"), &x));
    }
    let value = loop_dense(store, "value_head", &x)[0];
    let probs = loop_softmax(&loop_dense(store, "action_head", &x));
    (probs, value)
}

/// `p_link` oracle for one observation.
pub fn loop_link_prob(policy: &Policy, obs: &NeighborObs) -> f64 {
    let store = &policy.store;
    let n = policy.config.comm_hidden.len();
    let mut x = obs.to_array().to_vec();
    for i in 0..n {
        x = relu(loop_dense(store, &format!("comm.{i}"), &x));
    }
    loop_softmax(&loop_dense(store, &format!("comm.{n}"), &x))[0]
}

/// Random agent input with `n_tokens` sensed bodies, of which the first
/// `n_cand` are linkable and the first `n_links` of those granted.
pub fn random_input(rng: &mut impl Rng, n_tokens: usize, n_cand: usize, n_links: usize) -> AgentInput {
    use dmca::policy::Candidate;
    use dmca::state::EgoInput;
    let tokens: Vec<NeighborObs> = (0..n_tokens).map(|_| random_obs(rng)).collect();
    let mut candidates: Vec<Candidate> = tokens[..n_cand]
        .iter()
        .enumerate()
        .map(|(k, &obs)| Candidate { id: k + 1, obs, comm: (k < n_links).then(|| random_comm(rng)) })
        .collect();
    candidates.sort_by(|a, b| candidate_order(&a.obs, &b.obs));
    AgentInput {
        ego: EgoInput {
            d_goal: rng.gen_range(0.0..6.0),
            v_pref: 1.0,
            psi_rel: rng.gen_range(-3.0..3.0),
            r: 0.2,
        },
        ego_token: NeighborObs {
            p_rel: Vec2::ZERO,
            v_rel: random_vec(rng, 1.0),
            r_j: 0.2,
            d_a: 0.0,
            r_sum: 0.4,
        },
        tokens,
        candidates,
    }
}

/// Random fixed weights for a scalar test objective over a batch.
pub struct Objective {
    pub action: Tensor,
    pub value: f64,
    pub link: Option<Tensor>,
}

impl Objective {
    pub fn random(rng: &mut impl Rng, batch: usize, n_actions: usize, n_candidates: usize) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let action = Tensor::matrix(batch, n_actions, draw(batch * n_actions)).unwrap();
        let link = (n_candidates > 0).then(|| Tensor::matrix(n_candidates, 2, draw(n_candidates * 2)).unwrap());
        let value = draw(1)[0];
        Objective { action, value, link }
    }

    /// `Σ W⊙log π + c·Σ V² + Σ L⊙log p(link)` through the full network.
    pub fn build<'p>(
        &self,
        policy: &Policy,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        inputs: &[&AgentInput],
        links: Links<'_>,
    ) -> tensorgrad::Result<Var> {
        let vars = policy.forward_batch_with(store, tape, inputs, links).map_err(|e| match e {
            dmca::Error::Tensor(t) => t,
            other => tensorgrad::TensorError::InvalidArgument { op: "policy", reason: other.to_string() },
        })?;
        let w = tape.constant(self.action.clone());
        let a = tape.mul(vars.action_logp, w)?;
        let mut total = tape.sum(a);
        let v = tape.square(vars.value);
        let v = tape.sum(v);
        let v = tape.scale(v, self.value);
        total = tape.add(total, v)?;
        if let (Some(l), Some(lw)) = (vars.link_logp, &self.link) {
            let lw = tape.constant(lw.clone());
            let l = tape.mul(l, lw)?;
            let l = tape.sum(l);
            total = tape.add(total, l)?;
        }
        Ok(total)
    }
}

/// Finite-difference check of the whole network on one random case: a
/// tiny policy, a batch of one to three agents with `seed % 7` sensed
/// neighbors for the first and up to three granted links each. `relaxed`
/// gates through a Gumbel-Softmax sample, otherwise by the recorded links.
pub fn full_grad_check(seed: u64, relaxed: bool) -> GradCheckReport {
    // The objective is O(1) while some gradients are ~1e-6, so at ε = 1e-5
    // rounding noise alone reaches ~1e-9; at ε = 1e-4 a ReLU kink can fall
    // inside the stencil.
    full_grad_check_with(seed, relaxed, GradCheck { eps: 1e-4, alt_eps: Some(1e-5), ..GradCheck::default() })
}

pub fn full_grad_check_with(seed: u64, relaxed: bool, check: GradCheck) -> GradCheckReport {
    let mut r = rng(seed);
    let policy = generic_tiny(&mut r);
    let batch = r.gen_range(1..=3);
    let inputs: Vec<AgentInput> = (0..batch)
        .map(|b| {
            let n = if b == 0 { (seed % 7) as usize } else { r.gen_range(0..=6) };
            let cand = r.gen_range(0..=n);
            let links = r.gen_range(0..=cand.min(3));
            random_input(&mut r, n, cand, links)
        })
        .collect();
    let refs: Vec<&AgentInput> = inputs.iter().collect();
    let n_cand: usize = inputs.iter().map(|i| i.candidates.len()).sum();
    let noise = gumbel_noise(&mut r, n_cand, 2);
    let objective = Objective::random(&mut r, batch, policy.n_actions(), n_cand);
    let links = if relaxed && n_cand > 0 { Links::Relaxed { noise: &noise, tau: 0.7 } } else { Links::Fixed };
    check
        .run(&policy.store, |tape, store| objective.build(&policy, store, tape, &refs, links))
        .unwrap()
}

/// Tiny policy moved to a generic parameter point. Freshly initialised
/// biases are zero, which can leave pre-activations exactly on a ReLU kink
/// or the whole trunk inactive.
pub fn generic_tiny(rng: &mut impl Rng) -> Policy {
    let mut policy = Policy::new(PolicyConfig::tiny(), rng).unwrap();
    let ids: Vec<_> = policy.store.ids().collect();
    for id in ids {
        for x in policy.store.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    policy
}

/// `min_{s ≥ 1/τ} ‖v − s·p‖ − s·r` and its minimizer: negative exactly when
/// relative velocity `v` leads to contact within `τ`. Convex in `s`, so a
/// ternary search finds it.
pub fn vo_depth(v: Vec2, p: Vec2, r: f64, tau: f64) -> (f64, f64) {
    let g = |s: f64| (v - p * s).norm() - r * s;
    let lo0 = 1.0 / tau;
    let slope = p.norm() - r;
    let (mut lo, mut hi) = (lo0, lo0 + (v.norm() + g(lo0).abs() + 1.0) / slope + 1.0);
    for _ in 0..300 {
        let (a, b) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
        if g(a) <= g(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let s = 0.5 * (lo + hi);
    (g(s), s)
}

/// Closest point of the boundary of the truncated velocity obstacle to `v`
/// and the outward normal there, from the set definition alone.
pub fn vo_nearest(v: Vec2, p: Vec2, r: f64, tau: f64) -> (Vec2, Vec2) {
    let (depth, s) = vo_depth(v, p, r, tau);
    if depth > 0.0 {
        let c = p * s;
        let n = (v - c).normalized();
        return (c + n * (r * s), n);
    }
    // Inside a convex set: the nearest boundary point is the shortest exit
    // over all directions.
    let exit = |theta: f64| {
        let e = Vec2::from_angle(theta);
        let (mut lo, mut hi) = (0.0, 1.0);
        while vo_depth(v + e * hi, p, r, tau).0 < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if vo_depth(v + e * mid, p, r, tau).0 < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let n_dir = 720;
    let step = 2.0 * std::f64::consts::PI / n_dir as f64;
    let best = (0..n_dir).map(|i| i as f64 * step).min_by(|a, b| exit(*a).total_cmp(&exit(*b))).unwrap();
    let (mut a, mut b) = (best - step, best + step);
    for _ in 0..80 {
        let (x, y) = (a + (b - a) / 3.0, b - (b - a) / 3.0);
        if exit(x) <= exit(y) {
            b = y;
        } else {
            a = x;
        }
    }
    let theta = 0.5 * (a + b);
    let e = Vec2::from_angle(theta);
    (v + e * exit(theta), e)
}

/// Exact LP optimum by enumerating every candidate vertex: the target
/// itself, its projections onto each line and the circle, and all
/// line-line and line-circle intersections. `None` when infeasible.
pub fn lp_oracle(planes: &[dmca::orca::HalfPlane], v_max: f64, target: Vec2) -> Option<Vec2> {
    let mut cand = vec![target];
    if target.norm() > 0.0 {
        cand.push(target.normalized() * v_max);
    }
    for (i, a) in planes.iter().enumerate() {
        cand.push(a.point + a.direction * a.direction.dot(target - a.point));
        // Line-circle: ‖point + t·dir‖ = v_max.
        let (b, c) = (a.point.dot(a.direction), a.point.norm_sq() - v_max * v_max);
        let disc = b * b - c;
        if disc >= 0.0 {
            for t in [-b - disc.sqrt(), -b + disc.sqrt()] {
                cand.push(a.point + a.direction * t);
            }
        }
        for bp in &planes[i + 1..] {
            let det = a.direction.cross(bp.direction);
            if det.abs() > 1e-12 {
                let t = bp.direction.cross(a.point - bp.point) / det;
                cand.push(a.point + a.direction * t);
            }
        }
    }
    let tol = 1e-9;
    cand.into_iter()
        .filter(|c| c.norm() <= v_max + tol && planes.iter().all(|pl| pl.margin(*c) >= -tol))
        .min_by(|x, y| (*x - target).norm().total_cmp(&(*y - target).norm()))
}

/// Smallest worst-case violation over a dense grid of the speed disk.
pub fn grid_min_violation(planes: &[dmca::orca::HalfPlane], v_max: f64, n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            let v = Vec2::new(-v_max + 2.0 * v_max * i as f64 / n as f64, -v_max + 2.0 * v_max * j as f64 / n as f64);
            if v.norm() <= v_max {
                let worst = planes.iter().map(|pl| -pl.margin(v)).fold(0.0f64, f64::max);
                best = best.min(worst);
            }
        }
    }
    best
}

/// One random reciprocal half-plane checked against [`vo_nearest`]:
/// returns the larger of the point and normal errors.
pub fn halfplane_oracle_error(rng: &mut impl Rng) -> f64 {
    use dmca::orca::orca_halfplane;
    let tau = rng.gen_range(1.0..6.0);
    let mut ego = random_agent(rng, 0, 4.0);
    let mut nb = random_agent(rng, 1, 4.0);
    let r_sum = ego.r + nb.r;
    let gap = rng.gen_range(0.05..4.0);
    nb.p = ego.p + Vec2::from_angle(rng.gen_range(-3.2..3.2)) * (r_sum + gap);
    ego.v = random_vec(rng, 1.5);
    nb.v = random_vec(rng, 1.5);
    let plane = orca_halfplane(&ego, &nb, tau, 0.1);
    let rel_v = ego.v - nb.v;
    let (y, n) = vo_nearest(rel_v, nb.p - ego.p, r_sum, tau);
    let u = y - rel_v;
    let point_err = (plane.point - (ego.v + u * 0.5)).norm();
    let normal_err = if u.norm() > 1e-6 { (plane.normal() - n).norm() } else { 0.0 };
    point_err.max(normal_err)
}

/// One random feasible LP: distance between `solve` and [`lp_oracle`].
pub fn lp_oracle_error(rng: &mut impl Rng) -> f64 {
    use dmca::orca::{solve, HalfPlane};
    loop {
        let v_max = rng.gen_range(0.5..2.0);
        let planes: Vec<HalfPlane> = (0..rng.gen_range(1..8))
            .map(|_| HalfPlane { point: random_vec(rng, v_max), direction: Vec2::from_angle(rng.gen_range(-3.2..3.2)) })
            .collect();
        let target = random_vec(rng, 1.5 * v_max);
        if let Some(best) = lp_oracle(&planes, v_max, target) {
            return (solve(&planes, v_max, target) - best).norm();
        }
    }
}

/// Per agent: final status and the step count after which it stopped.
#[derive(Clone)]
pub struct Agent {
    pub status: Status,
    pub end: usize,
    pub links_per_step: usize,
}

pub fn synthetic(agents: &[Agent], steps: usize, seed: u64) -> EpisodeLog {
    let n = agents.len();
    let meta = EpisodeMeta {
        record: "meta".into(),
        scenario: "synthetic".into(),
        planner: "none".into(),
        seed,
        config: WorldConfig::default(),
        ids: (0..n).collect(),
        radii: vec![0.2; n],
        v_pref: vec![1.0; n],
        goals: vec![Vec2::ZERO; n],
        obstacles: vec![],
    };
    let mut records = Vec::new();
    for t in 0..steps {
        for (k, a) in agents.iter().enumerate() {
            if t >= a.end {
                continue;
            }
            let status = if t + 1 == a.end { a.status } else { Status::Active };
            records.push(StepRecord {
                t,
                agent: k,
                p: Vec2::ZERO,
                v: Vec2::ZERO,
                psi: 0.0,
                action: Some(Action::STOP),
                reward: 0.0,
                links: (0..a.links_per_step).map(|j| (k + j + 1) % n).collect(),
                status,
                neighbors: vec![],
            });
        }
    }
    for (k, a) in agents.iter().enumerate() {
        records.push(StepRecord {
            t: steps,
            agent: k,
            p: Vec2::ZERO,
            v: Vec2::ZERO,
            psi: 0.0,
            action: None,
            reward: 0.0,
            links: vec![],
            status: a.status,
            neighbors: vec![],
        });
    }
    EpisodeLog { meta, records }
}

pub fn all(status: Status, end: usize, n: usize) -> Vec<Agent> {
    (0..n).map(|_| Agent { status, end, links_per_step: 0 }).collect()
}
