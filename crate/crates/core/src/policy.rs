//! The navigation-and-communication policy network.
//!
//! Per agent the network
//! 1. encodes `[ego token, neighbor tokens…]` with multi-head attention and
//!    keeps the ego row (`e_o`),
//! 2. scores every linkable neighbor with a small MLP (`p_link`),
//! 3. feeds `[obs ⊕ comm]` of the granted links through an LSTM, farthest
//!    first, and keeps the final hidden state (`e_c`),
//! 4. maps `[ego, e_o, e_c]` through the navigation MLP to action
//!    log-probabilities and a state value.
//!
//! Everything runs batched: one tape evaluates any number of agents.
//!
//! Links enter the LSTM through a gate `z ∈ [0, 1]` per candidate:
//! `h ← z·LSTM(x, h) + (1 − z)·h`. With `z ∈ {0, 1}` this is exactly
//! "process the granted links only"; during training `z` is a
//! straight-through Gumbel sample so gradients reach the link selector.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::checkpoint;
use tensorgrad::gumbel::{argmax, gumbel_noise, gumbel_softmax};
use tensorgrad::nn::{Activation, Dense, Lstm, Mlp, MultiHeadAttention};
use tensorgrad::{ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::sim::Observation;
use crate::state::{wrap_angle, Action, CommState, EgoInput, NeighborObs};

/// Width of one LSTM input row: observation ⊕ communicated state.
pub const COMM_INPUT: usize = NeighborObs::LEN + CommState::LEN;

/// Discrete actions as (fraction of `v_pref`, heading offset) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSet {
    pub actions: Vec<(f64, f64)>,
}

impl Default for ActionSet {
    /// Speeds {1, ½}·v_pref × offsets {0, ±π/12, ±π/6}, plus stop.
    fn default() -> Self {
        let offsets = [0.0, PI / 12.0, -PI / 12.0, PI / 6.0, -PI / 6.0];
        let mut actions: Vec<(f64, f64)> =
            [1.0, 0.5].iter().flat_map(|&s| offsets.iter().map(move |&o| (s, o))).collect();
        actions.push((0.0, 0.0));
        ActionSet { actions }
    }
}

impl ActionSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.actions.iter().any(|&(s, _)| s == 0.0) {
            return Err(Error::Config("action set needs a stop action".into()));
        }
        if self.actions.iter().any(|&(s, o)| !(0.0..=1.0).contains(&s) || !o.is_finite()) {
            return Err(Error::Config("action speeds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Maps action `index` to a command for an agent with heading `psi`.
    pub fn command(&self, index: usize, psi: f64, v_pref: f64) -> Action {
        let (frac, offset) = self.actions[index];
        Action { speed: frac * v_pref, psi_cmd: wrap_angle(psi + offset) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub heads: usize,
    /// Per-head query/key width.
    pub key_dim: usize,
    /// Per-head value width.
    pub value_dim: usize,
    /// Width of `e_o`.
    pub embed_dim: usize,
    pub comm_hidden: Vec<usize>,
    pub lstm_hidden: usize,
    pub nav_hidden: Vec<usize>,
    pub action_set: ActionSet,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            heads: 20,
            key_dim: 128,
            value_dim: 256,
            embed_dim: 256,
            comm_hidden: vec![64, 64],
            lstm_hidden: 64,
            nav_hidden: vec![1024, 512, 512, 256],
            action_set: ActionSet::default(),
        }
    }
}

impl PolicyConfig {
    /// A narrow network with the same topology, for tests.
    pub fn tiny() -> Self {
        PolicyConfig {
            heads: 2,
            key_dim: 3,
            value_dim: 3,
            embed_dim: 5,
            comm_hidden: vec![4, 4],
            lstm_hidden: 3,
            nav_hidden: vec![6, 5],
            action_set: ActionSet::default(),
        }
    }

    pub fn nav_input(&self) -> usize {
        EgoInput::LEN + self.embed_dim + self.lstm_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.heads, self.key_dim, self.value_dim, self.embed_dim, self.lstm_hidden];
        if dims.contains(&0) || self.comm_hidden.contains(&0) || self.nav_hidden.is_empty() || self.nav_hidden.contains(&0)
        {
            return Err(Error::Config("policy widths must be positive".into()));
        }
        self.action_set.validate()
    }
}

/// One linkable neighbor. `comm` is present exactly when a link was
/// granted and the reply received.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub obs: NeighborObs,
    pub comm: Option<CommState>,
}

/// Everything the network reads for one agent at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput {
    pub ego: EgoInput,
    pub ego_token: NeighborObs,
    /// Every sensed body, obstacles included.
    pub tokens: Vec<NeighborObs>,
    /// Linkable neighbors in LSTM order (farthest first, closest last).
    pub candidates: Vec<Candidate>,
}

/// LSTM feed order: decreasing `d_a`, ties broken by the full observation
/// so that the order never depends on how neighbors were listed.
pub fn candidate_order(a: &NeighborObs, b: &NeighborObs) -> Ordering {
    b.d_a.total_cmp(&a.d_a).then_with(|| {
        let (x, y) = (a.to_array(), b.to_array());
        x.iter().zip(&y).map(|(p, q)| q.total_cmp(p)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

impl AgentInput {
    /// Input with no links granted yet.
    pub fn from_observation(obs: &Observation) -> Self {
        let mut candidates: Vec<Candidate> = obs
            .neighbors
            .iter()
            .filter_map(|n| n.id.map(|id| Candidate { id, obs: n.obs, comm: None }))
            .collect();
        candidates.sort_by(|a, b| candidate_order(&a.obs, &b.obs));
        AgentInput {
            ego: obs.ego,
            ego_token: obs.ego_token,
            tokens: obs.neighbors.iter().map(|n| n.obs).collect(),
            candidates,
        }
    }

    pub fn n_links(&self) -> usize {
        self.candidates.iter().filter(|c| c.comm.is_some()).count()
    }
}

/// How link gates are formed inside the batched forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Links<'a> {
    /// Gates are the recorded decisions (`comm.is_some()`), as constants.
    Fixed,
    /// Forward value is the recorded decision; the gradient flows through
    /// the relaxed Gumbel sample built from `noise` (one row per candidate).
    StraightThrough { noise: &'a Tensor, tau: f64 },
    /// Gates are the relaxed Gumbel sample itself. Candidates without a
    /// communicated state contribute zeros for it.
    Relaxed { noise: &'a Tensor, tau: f64 },
}

/// Tape handles produced by [`Policy::forward_batch`].
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    /// `B × A` action log-probabilities.
    pub action_logp: Var,
    /// `B × 1` state values.
    pub value: Var,
    /// `C × 2` log of `[p_link, 1 − p_link]` over all candidates in batch
    /// order; `None` when the batch has no candidates.
    pub link_logp: Option<Var>,
    /// `C × 1` gate values.
    pub gates: Option<Var>,
    pub e_o: Var,
    pub e_c: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub action_probs: Vec<f64>,
    pub value: f64,
    pub link_probs: Vec<f64>,
    pub link_samples: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub encoder: MultiHeadAttention,
    pub comm: Mlp,
    pub lstm: Lstm,
    pub nav: Mlp,
    pub value_head: Dense,
    pub action_head: Dense,
}

fn comm_activations(cfg: &PolicyConfig) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; cfg.comm_hidden.len()];
    acts.push(Activation::Identity);
    acts
}

fn nav_activations(cfg: &PolicyConfig) -> Vec<Activation> {
    vec![Activation::Relu; cfg.nav_hidden.len()]
}

impl Policy {
    pub fn new(config: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = MultiHeadAttention::new(
            &mut store,
            rng,
            "encoder",
            NeighborObs::LEN,
            config.heads,
            config.key_dim,
            config.value_dim,
            config.embed_dim,
        )?;
        let mut comm_widths = vec![NeighborObs::LEN];
        comm_widths.extend(&config.comm_hidden);
        comm_widths.push(2);
        let comm = Mlp::new(&mut store, rng, "comm", &comm_widths, &comm_activations(&config))?;
        let lstm = Lstm::new(&mut store, rng, "lstm", COMM_INPUT, config.lstm_hidden)?;
        let mut nav_widths = vec![config.nav_input()];
        nav_widths.extend(&config.nav_hidden);
        let nav = Mlp::new(&mut store, rng, "nav", &nav_widths, &nav_activations(&config))?;
        let trunk = *config.nav_hidden.last().expect("validated non-empty");
        let value_head = Dense::new(&mut store, rng, "value_head", trunk, 1)?;
        let action_head = Dense::new(&mut store, rng, "action_head", trunk, config.action_set.len())?;
        Ok(Policy { config, store, encoder, comm, lstm, nav, value_head, action_head })
    }

    pub fn n_actions(&self) -> usize {
        self.config.action_set.len()
    }

    /// Link logits (`C × 2`) for candidate observation rows.
    fn link_logits<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, cand_obs: Var) -> Result<Var> {
        Ok(self.comm.forward(tape, store, cand_obs)?)
    }

    /// `p_link` for each candidate of each input.
    pub fn link_probs(&self, inputs: &[&AgentInput]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<[f64; 7]> =
            inputs.iter().flat_map(|i| i.candidates.iter().map(|c| c.obs.to_array())).collect();
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
        if rows.is_empty() {
            return Ok(inputs.iter().map(|_| Vec::new()).collect());
        }
        let mut tape = Tape::inference();
        let x = tape.constant(rows_tensor(&rows));
        let logits = self.link_logits(&self.store, &mut tape, x)?;
        let probs = tape.softmax_rows(logits)?;
        let p = tape.value(probs);
        let mut r = 0;
        for inp in inputs {
            out.push((0..inp.candidates.len()).map(|k| p.get(r + k, 0)).collect());
            r += inp.candidates.len();
        }
        Ok(out)
    }

    /// Batched forward pass over `inputs`.
    pub fn forward_batch<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        inputs: &[&AgentInput],
        links: Links<'_>,
    ) -> Result<BatchVars> {
        self.forward_batch_with(&self.store, tape, inputs, links)
    }

    /// [`forward_batch`](Self::forward_batch) reading weights from `store`,
    /// which must share this policy's layout (a perturbed copy, say).
    pub fn forward_batch_with<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        inputs: &[&AgentInput],
        links: Links<'_>,
    ) -> Result<BatchVars> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let ego_rows: Vec<[f64; 4]> = inputs.iter().map(|i| i.ego.to_array()).collect();
        let ego = tape.constant(rows_tensor(&ego_rows));

        let mut token_rows: Vec<[f64; 7]> = Vec::new();
        let mut segments = Vec::with_capacity(b);
        for inp in inputs {
            segments.push((token_rows.len(), 1 + inp.tokens.len()));
            token_rows.push(inp.ego_token.to_array());
            token_rows.extend(inp.tokens.iter().map(|t| t.to_array()));
        }
        let tokens = tape.constant(rows_tensor(&token_rows));
        let e_o = self.encoder.forward_first_rows(tape, store, tokens, segments)?;

        let counts: Vec<usize> = inputs.iter().map(|i| i.candidates.len()).collect();
        let total: usize = counts.iter().sum();
        let hidden = self.config.lstm_hidden;
        let (e_c, link_logp, gates) = if total == 0 {
            (tape.constant(Tensor::zeros(&[b, hidden])), None, None)
        } else {
            let cands = inputs.iter().flat_map(|i| i.candidates.iter());
            let obs_rows: Vec<[f64; 7]> = cands.clone().map(|c| c.obs.to_array()).collect();
            let in_rows: Vec<[f64; COMM_INPUT]> = cands
                .clone()
                .map(|c| {
                    let mut row = [0.0; COMM_INPUT];
                    row[..7].copy_from_slice(&c.obs.to_array());
                    row[7..].copy_from_slice(&c.comm.unwrap_or_default().to_array());
                    row
                })
                .collect();
            let hard: Vec<f64> = cands.map(|c| if c.comm.is_some() { 1.0 } else { 0.0 }).collect();
            let hard = Tensor::matrix(total, 1, hard)?;

            let obs = tape.constant(rows_tensor(&obs_rows));
            let logits = self.link_logits(store, tape, obs)?;
            let logp = tape.log_softmax_rows(logits)?;
            let z = match links {
                Links::Fixed => tape.constant(hard),
                Links::StraightThrough { noise, tau } => {
                    let y = gumbel_softmax(tape, logits, noise, tau, false)?;
                    let soft = tape.slice_cols(y, 0, 1)?;
                    tape.straight_through(soft, hard)?
                }
                Links::Relaxed { noise, tau } => {
                    let y = gumbel_softmax(tape, logits, noise, tau, false)?;
                    tape.slice_cols(y, 0, 1)?
                }
            };
            let x_all = tape.constant(rows_tensor(&in_rows));
            let e_c = self.gated_lstm(store, tape, x_all, z, &counts)?;
            (e_c, Some(logp), Some(z))
        };

        let nav_in = tape.concat_cols(&[ego, e_o, e_c])?;
        let trunk = self.nav.forward(tape, store, nav_in)?;
        let value = self.value_head.forward(tape, store, trunk)?;
        let logits = self.action_head.forward(tape, store, trunk)?;
        let action_logp = tape.log_softmax_rows(logits)?;
        Ok(BatchVars { action_logp, value, link_logp, gates, e_o, e_c })
    }

    /// Runs the LSTM over each sample's candidates, right-aligned so every
    /// sample ends on its closest neighbor. Padding steps have gate 0.
    fn gated_lstm<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        x_all: Var,
        z: Var,
        counts: &[usize],
    ) -> Result<Var> {
        let b = counts.len();
        let hidden = self.config.lstm_hidden;
        let steps = counts.iter().copied().max().unwrap_or(0);
        let bound = self.lstm.bind(tape, store);
        let mut h = tape.constant(Tensor::zeros(&[b, hidden]));
        let mut c = tape.constant(Tensor::zeros(&[b, hidden]));
        for k in 0..steps {
            let mut base = 0;
            let idx: Vec<Option<usize>> = counts
                .iter()
                .map(|&n| {
                    let offset = steps - n;
                    let r = (k >= offset).then(|| base + k - offset);
                    base += n;
                    r
                })
                .collect();
            let x = tape.gather_rows(x_all, idx.clone())?;
            let zk = tape.gather_rows(z, idx)?;
            let keep = tape.affine(zk, -1.0, 1.0);
            let (hn, cn) = bound.step(tape, x, h, c)?;
            let (hn, cn) = (tape.mul_col(hn, zk)?, tape.mul_col(cn, zk)?);
            let (ho, co) = (tape.mul_col(h, keep)?, tape.mul_col(c, keep)?);
            h = tape.add(hn, ho)?;
            c = tape.add(cn, co)?;
        }
        Ok(h)
    }

    /// Action probabilities and values for a batch, links as recorded.
    pub fn evaluate(&self, inputs: &[&AgentInput]) -> Result<Vec<(Vec<f64>, f64)>> {
        let mut tape = Tape::inference();
        let vars = self.forward_batch(&mut tape, inputs, Links::Fixed)?;
        let logp = tape.value(vars.action_logp);
        let value = tape.value(vars.value);
        Ok((0..inputs.len())
            .map(|r| (logp.row_slice(r).iter().map(|l| l.exp()).collect(), value.get(r, 0)))
            .collect())
    }

    /// Observation encoding `e_o` of one agent.
    pub fn encode_observation(&self, ego_token: &NeighborObs, tokens: &[NeighborObs]) -> Result<Vec<f64>> {
        let mut rows = vec![ego_token.to_array()];
        rows.extend(tokens.iter().map(|t| t.to_array()));
        let mut tape = Tape::inference();
        let x = tape.constant(rows_tensor(&rows));
        let e = self.encoder.forward_first_rows(&mut tape, &self.store, x, vec![(0, rows.len())])?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Link probabilities and decisions for one agent's neighbors. Sample
    /// mode draws a hard Gumbel-Softmax sample; greedy links iff
    /// `p_link ≥ 0.5`.
    pub fn select_links(
        &self,
        neighbors: &[NeighborObs],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, Vec<bool>)> {
        let input = AgentInput {
            ego: EgoInput { d_goal: 0.0, v_pref: 0.0, psi_rel: 0.0, r: 0.0 },
            ego_token: neighbors.first().copied().unwrap_or(NeighborObs {
                p_rel: Default::default(),
                v_rel: Default::default(),
                r_j: 0.0,
                d_a: 0.0,
                r_sum: 0.0,
            }),
            tokens: Vec::new(),
            candidates: neighbors.iter().map(|&obs| Candidate { id: 0, obs, comm: None }).collect(),
        };
        let probs = self.link_probs(&[&input])?.remove(0);
        let (samples, _) = decide_links(&probs, mode, rng);
        Ok((probs, samples))
    }

    /// `e_c` from granted `(obs, comm)` pairs, ordered farthest first.
    pub fn aggregate_comm(&self, pairs: &[(NeighborObs, CommState)]) -> Result<Vec<f64>> {
        let mut sorted = pairs.to_vec();
        sorted.sort_by(|a, b| candidate_order(&a.0, &b.0));
        let hidden = self.config.lstm_hidden;
        let mut tape = Tape::inference();
        let bound = self.lstm.bind(&mut tape, &self.store);
        let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
        for (obs, comm) in &sorted {
            let mut row = obs.to_array().to_vec();
            row.extend(comm.to_array());
            let x = tape.constant(Tensor::row(&row));
            (h, c) = bound.step(&mut tape, x, h, c)?;
        }
        Ok(tape.value(h).data().to_vec())
    }

    /// Full single-agent forward with links as recorded in `input`.
    pub fn forward(&self, input: &AgentInput) -> Result<PolicyOutput> {
        let link_probs = self.link_probs(&[input])?.remove(0);
        let (action_probs, value) = self.evaluate(&[input])?.remove(0);
        Ok(PolicyOutput {
            action_probs,
            value,
            link_probs,
            link_samples: input.candidates.iter().map(|c| c.comm.is_some()).collect(),
        })
    }

    /// Writes parameters plus a manifest describing the architecture.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.store.clone();
        for (name, t) in manifest_records(&self.config) {
            out.insert(name, t)?;
        }
        checkpoint::save(&out, path)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`save`](Self::save), rebuilding the
    /// architecture from its manifest and checking every tensor shape.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = checkpoint::load(path)?;
        let config = config_from_manifest(&file)?;
        let mut policy = Policy::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let mut params = ParamStore::new();
        for id in policy.store.ids() {
            let name = policy.store.name(id);
            let t = file
                .by_name(name)
                .ok_or_else(|| Error::Manifest(format!("checkpoint lacks tensor {name}")))?;
            params.insert(name, t.clone())?;
        }
        policy.store.copy_from(&params).map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(policy)
    }
}

const MANIFEST_DIMS: &str = "manifest.dims";
const MANIFEST_ACTIONS: &str = "manifest.actions";
const MANIFEST_COMM: &str = "manifest.comm_hidden";
const MANIFEST_NAV: &str = "manifest.nav_hidden";

fn manifest_records(cfg: &PolicyConfig) -> Vec<(&'static str, Tensor)> {
    let widths = |v: &[usize]| Tensor::row(&v.iter().map(|&w| w as f64).collect::<Vec<_>>());
    let dims = [cfg.heads, cfg.key_dim, cfg.value_dim, cfg.embed_dim, cfg.lstm_hidden, cfg.action_set.len()];
    let actions: Vec<f64> = cfg.action_set.actions.iter().flat_map(|&(s, o)| [s, o]).collect();
    vec![
        (MANIFEST_DIMS, widths(&dims)),
        (MANIFEST_ACTIONS, Tensor::matrix(cfg.action_set.len(), 2, actions).expect("A × 2")),
        (MANIFEST_COMM, widths(&cfg.comm_hidden)),
        (MANIFEST_NAV, widths(&cfg.nav_hidden)),
    ]
}

fn config_from_manifest(file: &ParamStore) -> Result<PolicyConfig> {
    let get = |name: &str| file.by_name(name).ok_or_else(|| Error::Manifest(format!("missing {name}")));
    let widths = |t: &Tensor| -> Result<Vec<usize>> {
        t.data()
            .iter()
            .map(|&w| {
                if w >= 1.0 && w.fract() == 0.0 {
                    Ok(w as usize)
                } else {
                    Err(Error::Manifest(format!("bad width {w}")))
                }
            })
            .collect()
    };
    let dims = widths(get(MANIFEST_DIMS)?)?;
    if dims.len() != 6 {
        return Err(Error::Manifest(format!("expected 6 dims, found {}", dims.len())));
    }
    let actions = get(MANIFEST_ACTIONS)?;
    if actions.shape() != [dims[5], 2] {
        return Err(Error::Manifest(format!(
            "action table shape {:?} does not match {} actions",
            actions.shape(),
            dims[5]
        )));
    }
    let action_set = ActionSet { actions: (0..dims[5]).map(|r| (actions.get(r, 0), actions.get(r, 1))).collect() };
    Ok(PolicyConfig {
        heads: dims[0],
        key_dim: dims[1],
        value_dim: dims[2],
        embed_dim: dims[3],
        lstm_hidden: dims[4],
        comm_hidden: widths(get(MANIFEST_COMM)?)?,
        nav_hidden: widths(get(MANIFEST_NAV)?)?,
        action_set,
    })
}

pub(crate) fn rows_tensor<const N: usize>(rows: &[[f64; N]]) -> Tensor {
    Tensor::matrix(rows.len(), N, rows.iter().flatten().copied().collect()).expect("rows × N")
}

/// Link decisions from probabilities. Sample mode draws one Gumbel pair per
/// candidate and returns it (as `[g_link, g_no_link]`) for later
/// straight-through replay; greedy mode returns zero noise.
pub fn decide_links(p_link: &[f64], mode: Mode, rng: &mut impl Rng) -> (Vec<bool>, Vec<[f64; 2]>) {
    match mode {
        Mode::Greedy => (p_link.iter().map(|&p| p >= 0.5).collect(), vec![[0.0; 2]; p_link.len()]),
        Mode::Sample => {
            let noise = gumbel_noise(rng, p_link.len(), 2);
            let links = p_link
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let g = noise.row_slice(k);
                    // log p − log(1 − p) compared with the noise difference.
                    let a = p.ln() + g[0];
                    let b = (1.0 - p).ln() + g[1];
                    a >= b
                })
                .collect();
            let rows = (0..p_link.len()).map(|k| [noise.get(k, 0), noise.get(k, 1)]).collect();
            (links, rows)
        }
    }
}

/// Chooses an action index: argmax (lowest index on ties) or a draw.
pub fn choose_action(probs: &[f64], mode: Mode, rng: &mut impl Rng) -> usize {
    match mode {
        Mode::Greedy => argmax(probs),
        Mode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
        }
    }
}

/// Picks an action and maps it to a command.
pub fn act(
    probs: &[f64],
    mode: Mode,
    rng: &mut impl Rng,
    action_set: &ActionSet,
    psi: f64,
    v_pref: f64,
) -> (usize, Action) {
    let index = choose_action(probs, mode, rng);
    (index, action_set.command(index, psi, v_pref))
}
