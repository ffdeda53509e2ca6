//! Gumbel-Softmax sampling with an optional straight-through hard output.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// One standard Gumbel draw, `-ln(-ln u)` with `u ~ U(0, 1)`.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

pub fn gumbel_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| gumbel(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("extent product matches")
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax((logits + noise) / tau)` for a single row, without a tape.
pub fn relaxed_sample(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(TensorError::InvalidTemperature(tau));
    }
    let mut y: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    softmax_in_place(&mut y);
    Ok(y)
}

/// Draws one Gumbel-Softmax sample from a row of logits.
///
/// With `hard` set, the result is the one-hot vector of the relaxed sample's
/// argmax, which is distributed exactly as `softmax(logits)`.
pub fn gumbel_softmax_sample(
    logits: &[f64],
    tau: f64,
    rng: &mut impl Rng,
    hard: bool,
) -> Result<Vec<f64>> {
    let noise: Vec<f64> = logits.iter().map(|_| gumbel(rng)).collect();
    let y = relaxed_sample(logits, &noise, tau)?;
    Ok(if hard { one_hot(argmax(&y), y.len()) } else { y })
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Tape version over a batch of logit rows with pre-drawn `noise`.
///
/// The hard variant returns one-hot rows in the forward pass while the
/// gradient flows through the relaxed sample (straight-through estimator).
pub fn gumbel_softmax(
    tape: &mut Tape<'_>,
    logits: Var,
    noise: &Tensor,
    tau: f64,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::InvalidTemperature(tau));
    }
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let soft = tape.softmax_rows(scaled)?;
    if !hard {
        return Ok(soft);
    }
    let y = tape.value(soft);
    let n = y.cols();
    let mut data = Vec::with_capacity(y.len());
    for r in 0..y.rows() {
        data.extend(one_hot(argmax(y.row_slice(r)), n));
    }
    let hard_value = Tensor::new(y.shape().to_vec(), data)?;
    tape.straight_through(soft, hard_value)
}
