mod common;

use common::*;
use dmca::policy::{AgentInput, Policy, PolicyConfig};
use dmca::scenario::Family;
use dmca::train::*;
use dmca::Error;
use rand::Rng;
use tensorgrad::gumbel::gumbel_noise;
use tensorgrad::{ParamStore, Tape};

fn small(seed: u64, updates: usize) -> TrainConfig {
    let mut cfg = TrainConfig::preset("dmca").unwrap().phase1_only();
    cfg.seed = seed;
    cfg.policy = PolicyConfig::tiny();
    cfg.n_workers = 2;
    cfg.rollout_len = 8;
    cfg.lr = 1e-3;
    cfg.phases[0].updates = updates;
    cfg.eval.every = 0;
    cfg.checkpoint_every = 0;
    cfg
}

#[test]
fn return_examples() {
    let (r, a) = returns_and_advantages(&[0.0, 0.0, 1.0], &[0.0; 3], &[false, false, true], 0.0, 1.0);
    assert_eq!(r, [1.0, 1.0, 1.0]);
    assert_eq!(a, r);
    let (r, _) = returns_and_advantages(&[0.0, 0.0, 1.0], &[0.0; 3], &[false, false, true], 0.0, 0.9);
    assert!(close(r[0], 0.81, 1e-15) && close(r[1], 0.9, 1e-15) && r[2] == 1.0);
    let (r, a) = returns_and_advantages(&[0.0; 4], &[0.0; 4], &[false; 4], 0.0, 0.97);
    assert!(r.iter().chain(&a).all(|&x| x == 0.0));
}

#[test]
fn done_cuts_the_bootstrap() {
    let (r, a) = returns_and_advantages(&[0.0, 1.0, 0.0], &[0.1, 0.2, 0.3], &[false, true, false], 5.0, 0.5);
    assert_eq!(r, [0.5, 1.0, 2.5]);
    assert!(close(a[0], 0.4, 1e-15) && close(a[1], 0.8, 1e-15) && close(a[2], 2.2, 1e-15));
}

#[test]
fn returns_match_direct_sums() {
    let mut r = rng(1);
    for _ in 0..200 {
        let n = r.gen_range(1..20);
        let rewards: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| r.gen_bool(0.2)).collect();
        let gamma = r.gen_range(0.5..1.0);
        let boot = r.gen_range(-1.0..1.0);
        let (ret, _) = returns_and_advantages(&rewards, &vec![0.0; n], &dones, boot, gamma);
        for t in 0..n {
            let mut expect = 0.0;
            let mut discount = 1.0;
            let mut cut = false;
            for u in t..n {
                expect += discount * rewards[u];
                discount *= gamma;
                if dones[u] {
                    cut = true;
                    break;
                }
            }
            if !cut {
                expect += discount * boot;
            }
            assert!(close(ret[t], expect, 1e-12));
        }
    }
}

#[test]
fn one_step_rollout_of_two_agents() {
    let mut cfg = small(0, 1);
    cfg.n_workers = 1;
    cfg.rollout_len = 1;
    cfg.phases[0].scenarios = vec![PhaseScenario::new(Family::Swap, 2, 2)];
    let mut trainer = Trainer::new(cfg).unwrap();
    let rollout = trainer.rollout().unwrap();
    assert_eq!(rollout.len(), 2);
    assert_eq!(rollout.env_steps, 1);
    assert_eq!(rollout.trajectories.len(), 2);
}

#[test]
fn env_steps_count_world_steps_across_workers() {
    let mut trainer = Trainer::new(small(2, 3)).unwrap();
    let record = trainer.step().unwrap();
    assert_eq!(record.env_steps, 16);
    assert_eq!(trainer.env_steps, 16);
}

#[test]
fn seeded_training_is_reproducible() {
    let run = |seed| {
        let mut t = Trainer::new(small(seed, 4)).unwrap();
        let summary = t.run(None, |_| {}).unwrap();
        let params: Vec<u64> = t.policy.store.iter().flat_map(|(_, _, x)| x.data().to_vec()).map(f64::to_bits).collect();
        (summary.records, params)
    };
    let (a, pa) = run(3);
    let (b, pb) = run(3);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let (_, pc) = run(4);
    assert_ne!(pa, pc);
}

fn transition(input: AgentInput, reward: f64, value: f64, action: usize, rng: &mut impl Rng) -> Transition {
    let n = input.candidates.len();
    let noise = gumbel_noise(rng, n, 2);
    Transition {
        noise: (0..n).map(|k| [noise.get(k, 0), noise.get(k, 1)]).collect(),
        p_link: vec![0.5; n],
        input,
        action,
        reward,
        value,
        value_no_link: value,
        done: false,
    }
}

fn weights() -> LossWeights {
    LossWeights { value_coef: 0.5, entropy_coef: 1e-3, link_coef: 1.0, gumbel_tau: 1.0 }
}

#[test]
fn loss_of_uniform_policy_with_exact_values() {
    let mut policy = Policy::new(PolicyConfig::tiny(), &mut rng(5)).unwrap();
    for name in ["action_head.weight", "action_head.bias", "value_head.weight", "value_head.bias"] {
        let id = policy.store.id(name).unwrap();
        policy.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut r = rng(6);
    let ts: Vec<Transition> = (0..5).map(|_| transition(random_input(&mut r, 3, 0, 0), 0.0, 0.0, 2, &mut r)).collect();
    let batch: Vec<Sample> = ts.iter().map(|t| Sample { transition: t, ret: 0.0, advantage: 0.0, link_advantage: 0.0 }).collect();
    let (parts, _) = loss_and_gradients(&policy, &batch, &weights(), 2).unwrap();
    let a = policy.n_actions() as f64;
    assert!(close(parts.total, -1e-3 * a.ln(), 1e-12));
    assert!(close(parts.entropy, a.ln(), 1e-12));
    assert_eq!(parts.value, 0.0);
    assert_eq!(parts.link, 0.0);
}

fn random_samples(r: &mut impl Rng, n: usize, n_actions: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let k = r.gen_range(0..6);
            let c = r.gen_range(0..=k);
            let l = r.gen_range(0..=c);
            let input = random_input(r, k, c, l);
            let action = r.gen_range(0..n_actions);
            transition(input, r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), action, r)
        })
        .collect()
}

fn to_samples<'a>(ts: &'a [Transition], r: &mut impl Rng) -> Vec<Sample<'a>> {
    ts.iter()
        .map(|t| Sample {
            transition: t,
            ret: r.gen_range(-1.0..1.0),
            advantage: r.gen_range(-1.0..1.0),
            link_advantage: r.gen_range(-1.0..1.0),
        })
        .collect()
}

#[test]
fn value_term_is_linear_in_its_weight() {
    let mut r = rng(7);
    let policy = generic_tiny(&mut r);
    let ts = random_samples(&mut r, 9, policy.n_actions());
    let batch = to_samples(&ts, &mut r);
    let loss = |c: f64| {
        let w = LossWeights { value_coef: c, ..weights() };
        loss_and_gradients(&policy, &batch, &w, 4).unwrap().0
    };
    let (l1, l2) = (loss(1.0), loss(2.0));
    let values = policy.evaluate(&batch.iter().map(|s| &s.transition.input).collect::<Vec<_>>()).unwrap();
    let mse: f64 = batch.iter().zip(&values).map(|(s, (_, v))| (s.ret - v).powi(2)).sum::<f64>() / batch.len() as f64;
    assert!(close(l2.total - l1.total, mse, 1e-12));
    assert!(close(l1.value, mse, 1e-12));
}

#[test]
fn chunking_does_not_change_the_loss() {
    let mut r = rng(8);
    let policy = generic_tiny(&mut r);
    let ts = random_samples(&mut r, 11, policy.n_actions());
    let batch = to_samples(&ts, &mut r);
    let (a, ga) = loss_and_gradients(&policy, &batch, &weights(), 1).unwrap();
    let (b, gb) = loss_and_gradients(&policy, &batch, &weights(), 64).unwrap();
    assert!(close(a.total, b.total, 1e-12));
    for (x, y) in ga.iter().zip(gb.iter()) {
        assert!(max_diff(x.data(), y.data()) < 1e-12);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    // The straight-through path makes the selector gradient a surrogate, so
    // finite differences cover the remaining parameters; samples without
    // candidates are checked in full.
    let mut r = rng(9);
    for case in 0..6 {
        let policy = generic_tiny(&mut r);
        let ts = random_samples(&mut r, 5, policy.n_actions());
        let batch = to_samples(&ts, &mut r);
        let w = weights();
        let (_, grads) = loss_and_gradients(&policy, &batch, &w, 8).unwrap();
        let eval = |store: &ParamStore| {
            let mut tape = Tape::inference();
            let (_, p) = loss_on_tape(&policy, store, &mut tape, &batch, &w, batch.len()).unwrap();
            p.total
        };
        let any_candidates = ts.iter().any(|t| !t.input.candidates.is_empty());
        let mut probe = policy.store.clone();
        for id in policy.store.ids() {
            let name = policy.store.name(id).to_string();
            if any_candidates && name.starts_with("comm.") {
                continue;
            }
            for j in 0..policy.store.get(id).len() {
                let orig = policy.store.get(id).data()[j];
                probe.get_mut(id).data_mut()[j] = orig + 1e-5;
                let plus = eval(&probe);
                probe.get_mut(id).data_mut()[j] = orig - 1e-5;
                let minus = eval(&probe);
                probe.get_mut(id).data_mut()[j] = orig;
                let numeric = (plus - minus) / 2e-5;
                let analytic = grads.get(id).data()[j];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
                assert!(rel < 1e-4, "case {case} {name}[{j}]: {analytic} vs {numeric}");
            }
        }
    }
}

#[test]
fn link_term_reaches_the_selector() {
    let mut r = rng(10);
    let policy = generic_tiny(&mut r);
    let ts: Vec<Transition> =
        (0..4).map(|_| transition(random_input(&mut r, 4, 4, 2), 0.0, 0.0, 0, &mut r)).collect();
    let batch = to_samples(&ts, &mut r);
    let (parts, grads) = loss_and_gradients(&policy, &batch, &weights(), 8).unwrap();
    assert!(parts.link != 0.0);
    let comm = policy.store.id("comm.0.weight").unwrap();
    assert!(grads.get(comm).data().iter().any(|g| g.abs() > 1e-9));

    let off = LossWeights { link_coef: 0.0, ..weights() };
    let (parts, _) = loss_and_gradients(&policy, &batch, &off, 8).unwrap();
    assert_eq!(parts.link, 0.0);
}

#[test]
fn penalty_only_rewards_count_links() {
    let mut cfg = small(11, 1);
    cfg.lambda_comm = 0.5;
    cfg.penalty_only = true;
    let mut tight = PhaseScenario::new(Family::Circle, 4, 4);
    tight.geometry.circle_radius = Some(1.5);
    cfg.phases[0].scenarios = vec![tight];
    let mut trainer = Trainer::new(cfg).unwrap();
    let rollout = trainer.rollout().unwrap();
    assert!(rollout.transitions().any(|t| t.n_links() > 0));
    for t in rollout.transitions() {
        assert_eq!(t.reward, -0.5 * t.n_links() as f64);
    }
}

#[test]
fn link_baseline_withholds_the_links() {
    let mut cfg = small(12, 1);
    let mut tight = PhaseScenario::new(Family::Circle, 4, 4);
    tight.geometry.circle_radius = Some(1.5);
    cfg.phases[0].scenarios = vec![tight];
    let mut trainer = Trainer::new(cfg).unwrap();
    let rollout = trainer.rollout().unwrap();
    let mut linked = 0;
    for t in rollout.transitions() {
        let mut bare = t.input.clone();
        bare.candidates.iter_mut().for_each(|c| c.comm = None);
        let (_, v) = trainer.policy.evaluate(&[&bare]).unwrap().remove(0);
        assert!(close(t.value_no_link, v, 1e-12));
        if t.n_links() == 0 {
            assert_eq!(t.value_no_link, t.value);
        } else {
            linked += 1;
        }
    }
    assert!(linked > 0);
    for s in samples(&rollout, 0.97) {
        assert!(close(s.ret - s.link_advantage, s.transition.value_no_link, 1e-12));
        assert!(close(s.ret - s.advantage, s.transition.value, 1e-12));
    }
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = TrainConfig::preset("dmca-lc").unwrap();
    assert_eq!(cfg.lambda_comm, 1e-4);
    assert_eq!(cfg.world_config().lambda_comm, 1e-4);
    let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert!(TrainConfig::preset("broadcast").is_err());
    assert!(TrainConfig::from_toml("gamma = 0.9\nbogus = 1\n").is_err());
    let partial = TrainConfig::from_toml("seed = 7\nrollout_len = 16\n").unwrap();
    assert_eq!((partial.seed, partial.rollout_len, partial.gamma), (7, 16, 0.97));
    assert!(TrainConfig::from_toml("gamma = 1.5\n").is_err());
    assert!(TrainConfig::from_toml("penalty_only = true\n").is_err());
}

#[test]
fn defaults() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.gamma, cfg.rollout_len, cfg.n_workers), (0.97, 32, 8));
    assert_eq!((cfg.lr, cfg.entropy_coef, cfg.value_coef), (1e-4, 1e-3, 0.5));
    assert_eq!(cfg.phases.len(), 2);
    assert_eq!(cfg.total_updates(), 4000);
}

#[test]
fn run_writes_metrics_config_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(12, 6);
    cfg.checkpoint_every = 3;
    cfg.eval.every = 3;
    cfg.eval.n_agents = 2;
    cfg.world.t_max = 50;
    let (policy, summary) = train(cfg.clone(), Some(dir.path())).unwrap();
    assert_eq!(summary.updates, 6);
    assert_eq!(summary.checkpoints.len(), 2);
    let lines: Vec<MetricsRecord> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, summary.records);
    assert!(lines.windows(2).all(|w| w[1].update == w[0].update + 1 && w[1].env_steps > w[0].env_steps));
    assert!(lines.iter().all(|l| l.eval_success.is_some() == (l.update % 3 == 0)));
    assert_eq!(TrainConfig::load(dir.path().join("config.toml")).unwrap(), cfg);
    let last = Policy::load(summary.checkpoints.last().unwrap()).unwrap();
    assert_eq!(last.store.iter().count(), policy.store.iter().count());
    for ((_, _, a), (_, _, b)) in last.store.iter().zip(policy.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn step_budget_stops_training() {
    let mut cfg = small(13, 100);
    cfg.max_env_steps = Some(40);
    let (_, summary) = train(cfg, None).unwrap();
    assert_eq!(summary.env_steps, 48);
    assert_eq!(summary.updates, 3);
}

#[test]
fn non_finite_update_is_reported_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(14, 3);
    let mut policy = Policy::new(cfg.policy.clone(), &mut rng(0)).unwrap();
    let id = policy.store.id("value_head.bias").unwrap();
    policy.store.get_mut(id).data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::with_policy(cfg, policy).unwrap();
    let err = trainer.run(Some(dir.path()), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(dir.path().join("dmca_0_nonfinite.ckpt").exists());
}

#[test]
fn phases_advance_after_their_budget() {
    let mut cfg = small(15, 2);
    cfg.phases.push(Phase { name: "later".into(), updates: 2, scenarios: vec![PhaseScenario::new(Family::Circle, 3, 3)] });
    let mut trainer = Trainer::new(cfg).unwrap();
    let names: Vec<String> = (0..4).map(|_| trainer.step().unwrap().phase).collect();
    assert_eq!(names, ["phase1", "phase1", "later", "later"]);
    assert!(trainer.finished());
}
