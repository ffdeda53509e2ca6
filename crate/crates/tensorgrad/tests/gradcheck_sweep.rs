//! Every differentiable primitive against central differences on random
//! shapes, 100 seeds each.

mod common;

use common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tensorgrad::gumbel::{gumbel_noise, gumbel_softmax};
use tensorgrad::nn::{attention, Lstm, MultiHeadAttention};
use tensorgrad::{GradCheck, ParamStore, Result, Tape, Tensor, Var};

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar with a fixed random weighting so that
/// normalising ops (softmax rows summing to one) still carry gradient.
fn project(tape: &mut Tape<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn weights_for(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(name: &str, build: F)
where
    F: Fn(&mut ChaCha8Rng, &mut ParamStore) -> Box<dyn for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let f = build(&mut r, &mut store);
        let report = GradCheck::default().run(&store, |t, s| f(t, s)).unwrap();
        assert!(report.checked > 0, "{name}: nothing checked");
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: {:.3e} at {:?}",
            report.max_rel_error,
            report.worst
        );
        worst = worst.max(report.max_rel_error);
    }
    println!("{name}: worst relative error {worst:.2e}");
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.gen_range(1..5), r.gen_range(1..6))
}

/// Elementwise unary op applied to one random parameter tensor.
fn unary(name: &str, op: fn(&mut Tape<'_>, Var) -> Result<Var>, shift: f64) {
    check(name, |r, store| {
        let (m, n) = dims(r);
        let x = random(r, m, n).map(|v| v + shift);
        let id = store.insert("x", x).unwrap();
        let w = weights_for(r, &[m, n]);
        Box::new(move |t, s| {
            let x = t.param(s, id);
            let y = op(t, x)?;
            project(t, y, &w)
        })
    });
}

#[test]
fn elementwise_unary_ops() {
    unary("tanh", |t, x| Ok(t.tanh(x)), 0.0);
    unary("sigmoid", |t, x| Ok(t.sigmoid(x)), 0.0);
    unary("exp", |t, x| Ok(t.exp(x)), 0.0);
    unary("ln", |t, x| Ok(t.ln(x)), 2.0);
    unary("square", |t, x| Ok(t.square(x)), 0.0);
    unary("neg", |t, x| Ok(t.neg(x)), 0.0);
    unary("affine", |t, x| Ok(t.affine(x, -1.7, 0.3)), 0.0);
    unary("softmax_rows", |t, x| t.softmax_rows(x), 0.0);
    unary("log_softmax_rows", |t, x| t.log_softmax_rows(x), 0.0);
    unary("transpose", |t, x| {
        let y = t.transpose(x)?;
        let y = t.square(y);
        t.transpose(y)
    }, 0.0);
}

#[test]
fn reductions() {
    check("mean", |r, store| {
        let (m, n) = dims(r);
        let id = store.insert("x", random(r, m, n)).unwrap();
        Box::new(move |t, s| {
            let x = t.param(s, id);
            let sq = t.square(x);
            let mean = t.mean(sq);
            let sum = t.sum(x);
            t.mul(mean, sum)
        })
    });
}

#[test]
fn relu_away_from_kink() {
    check("relu", |r, store| {
        let (m, n) = dims(r);
        // Keep entries at least 0.05 from zero so ±ε never crosses the kink.
        let x = random(r, m, n).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let id = store.insert("x", x).unwrap();
        let w = weights_for(r, &[m, n]);
        Box::new(move |t, s| {
            let x = t.param(s, id);
            let y = t.relu(x);
            project(t, y, &w)
        })
    });
}

#[test]
fn binary_ops() {
    check("matmul", |r, store| {
        let (m, k) = dims(r);
        let n = r.gen_range(1..5);
        let a = store.insert("a", random(r, m, k)).unwrap();
        let b = store.insert("b", random(r, k, n)).unwrap();
        let w = weights_for(r, &[m, n]);
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let y = t.matmul(a, b)?;
            project(t, y, &w)
        })
    });
    check("add_bias", |r, store| {
        let (m, n) = dims(r);
        let x = store.insert("x", random(r, m, n)).unwrap();
        let b = store.insert("b", random(r, 1, n).map(|v| v)).unwrap();
        let w = weights_for(r, &[m, n]);
        Box::new(move |t, s| {
            let (x, b) = (t.param(s, x), t.param(s, b));
            let y = t.add_bias(x, b)?;
            let y = t.tanh(y);
            project(t, y, &w)
        })
    });
    check("add_sub_mul", |r, store| {
        let (m, n) = dims(r);
        let a = store.insert("a", random(r, m, n)).unwrap();
        let b = store.insert("b", random(r, m, n)).unwrap();
        let w = weights_for(r, &[m, n]);
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let sum = t.add(a, b)?;
            let diff = t.sub(a, b)?;
            let y = t.mul(sum, diff)?;
            let y = t.mul(y, a)?;
            project(t, y, &w)
        })
    });
    check("mul_col", |r, store| {
        let (m, n) = dims(r);
        let x = store.insert("x", random(r, m, n)).unwrap();
        let c = store.insert("c", random(r, m, 1)).unwrap();
        let w = weights_for(r, &[m, n]);
        Box::new(move |t, s| {
            let (x, c) = (t.param(s, x), t.param(s, c));
            let y = t.mul_col(x, c)?;
            project(t, y, &w)
        })
    });
}

#[test]
fn indexing_ops() {
    check("pick", |r, store| {
        let (m, n) = dims(r);
        let x = store.insert("x", random(r, m, n)).unwrap();
        let idx: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
        let w = weights_for(r, &[m, 1]);
        Box::new(move |t, s| {
            let x = t.param(s, x);
            let l = t.log_softmax_rows(x)?;
            let y = t.pick(l, idx.clone())?;
            project(t, y, &w)
        })
    });
    check("concat_slice", |r, store| {
        let m = r.gen_range(1..5);
        let (n1, n2) = (r.gen_range(1..4), r.gen_range(1..4));
        let a = store.insert("a", random(r, m, n1)).unwrap();
        let b = store.insert("b", random(r, m, n2)).unwrap();
        let start = r.gen_range(0..n1 + n2);
        let len = r.gen_range(1..=n1 + n2 - start);
        let w = weights_for(r, &[m, len]);
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let sq = t.square(b);
            let c = t.concat_cols(&[a, sq])?;
            let y = t.slice_cols(c, start, len)?;
            project(t, y, &w)
        })
    });
    check("gather_rows", |r, store| {
        let (m, n) = dims(r);
        let x = store.insert("x", random(r, m, n)).unwrap();
        let out = r.gen_range(1..7);
        let idx: Vec<Option<usize>> = (0..out)
            .map(|_| if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..m)) })
            .collect();
        let w = weights_for(r, &[out, n]);
        Box::new(move |t, s| {
            let x = t.param(s, x);
            let y = t.gather_rows(x, idx.clone())?;
            let y = t.tanh(y);
            project(t, y, &w)
        })
    });
}

#[test]
fn attention_ops() {
    check("attention", |r, store| {
        let (sq, sk) = (r.gen_range(1..5), r.gen_range(1..5));
        let (dk, dv) = (r.gen_range(1..4), r.gen_range(1..4));
        let q = store.insert("q", random(r, sq, dk)).unwrap();
        let k = store.insert("k", random(r, sk, dk)).unwrap();
        let v = store.insert("v", random(r, sk, dv)).unwrap();
        let w = weights_for(r, &[sq, dv]);
        Box::new(move |t, s| {
            let (q, k, v) = (t.param(s, q), t.param(s, k), t.param(s, v));
            let y = attention(t, q, k, v)?;
            project(t, y, &w)
        })
    });
    check("segment_attention", |r, store| {
        let heads = r.gen_range(1..4);
        let (dk, dv) = (r.gen_range(1..3), r.gen_range(1..3));
        let b = r.gen_range(1..4);
        let mut segments = Vec::new();
        let mut total = 0;
        for _ in 0..b {
            let len = r.gen_range(1..5);
            segments.push((total, len));
            total += len;
        }
        let q = store.insert("q", random(r, b, heads * dk)).unwrap();
        let k = store.insert("k", random(r, total, heads * dk)).unwrap();
        let v = store.insert("v", random(r, total, heads * dv)).unwrap();
        let w = weights_for(r, &[b, heads * dv]);
        Box::new(move |t, s| {
            let (q, k, v) = (t.param(s, q), t.param(s, k), t.param(s, v));
            let y = t.segment_attention(q, k, v, segments.clone(), heads)?;
            project(t, y, &w)
        })
    });
    check("multi_head_attention", |r, store| {
        let heads = r.gen_range(1..4);
        let input = r.gen_range(1..5);
        let mha = MultiHeadAttention::new(store, r, "mha", input, heads, 2, 2, 3).unwrap();
        let len = r.gen_range(1..5);
        let x = random(r, len, input);
        let w = weights_for(r, &[len, 3]);
        Box::new(move |t, s| {
            let x = t.constant(x.clone());
            let y = mha.forward(t, s, x)?;
            project(t, y, &w)
        })
    });
}

#[test]
fn lstm_step_sequence() {
    check("lstm", |r, store| {
        let (input, hidden) = (r.gen_range(1..5), r.gen_range(1..5));
        let lstm = Lstm::new(store, r, "lstm", input, hidden).unwrap();
        let steps = r.gen_range(1..4);
        let xs: Vec<Tensor> = (0..steps).map(|_| random(r, 2, input)).collect();
        let h0 = store.insert("h0", random(r, 2, hidden)).unwrap();
        let c0 = store.insert("c0", random(r, 2, hidden)).unwrap();
        let w = weights_for(r, &[2, hidden]);
        Box::new(move |t, s| {
            let bound = lstm.bind(t, s);
            let (mut h, mut c) = (t.param(s, h0), t.param(s, c0));
            for x in &xs {
                let x = t.constant(x.clone());
                (h, c) = bound.step(t, x, h, c)?;
            }
            let hc = t.add(h, c)?;
            project(t, hc, &w)
        })
    });
}

#[test]
fn gumbel_soft_relaxation() {
    check("gumbel_softmax", |r, store| {
        let rows = r.gen_range(1..5);
        let logits = store.insert("logits", random(r, rows, 2).map(|v| 2.0 * v)).unwrap();
        let noise = gumbel_noise(r, rows, 2);
        let tau = r.gen_range(0.5..2.0);
        let w = weights_for(r, &[rows, 2]);
        Box::new(move |t, s| {
            let l = t.param(s, logits);
            let y = gumbel_softmax(t, l, &noise, tau, false)?;
            project(t, y, &w)
        })
    });
}
