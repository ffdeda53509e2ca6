//! Layers built from tape primitives.
//!
//! Each layer owns [`ParamId`]s into a [`ParamStore`]. Calling `bind` puts
//! the parameters on a tape once, so an unrolled recurrence reuses the same
//! nodes at every step.

use rand::Rng;

use crate::error::{mismatch, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    w: Var,
    b: Var,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.insert(format!("{prefix}.weight"), glorot_uniform(rng, fan_in, fan_out))?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Looks up an existing layer by prefix.
    pub fn existing(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = store.id(&format!("{prefix}.weight"))?;
        let bias = store.id(&format!("{prefix}.bias"))?;
        let shape = store.get(weight).shape();
        Ok(Self {
            weight,
            bias,
            fan_in: shape[0],
            fan_out: shape[1],
        })
    }

    pub fn bind<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore) -> BoundDense {
        BoundDense {
            w: tape.param(store, self.weight),
            b: tape.param(store, self.bias),
        }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        self.bind(tape, store).forward(tape, x)
    }
}

impl BoundDense {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }
}

/// Stack of dense layers with one activation per layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Dense, Activation)>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        widths: &[usize],
        activations: &[Activation],
    ) -> Result<Self> {
        assert_eq!(widths.len(), activations.len() + 1, "one activation per layer");
        let layers = widths
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &act))| {
                Ok((Dense::new(store, rng, &format!("{prefix}.{i}"), w[0], w[1])?, act))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn existing(store: &ParamStore, prefix: &str, activations: &[Activation]) -> Result<Self> {
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, &act)| Ok((Dense::existing(store, &format!("{prefix}.{i}"))?, act)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, mut x: Var) -> Result<Var> {
        for (layer, act) in &self.layers {
            let y = layer.forward(tape, store, x)?;
            x = act.apply(tape, y);
        }
        Ok(x)
    }
}

/// Single-layer LSTM with gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    wi: Var,
    wh: Var,
    b: Var,
    hidden: usize,
}

impl Lstm {
    /// Glorot weights; forget-gate bias starts at +1.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w_input = store.insert(
            format!("{prefix}.weight_ih"),
            glorot_uniform(rng, input, 4 * hidden),
        )?;
        let w_hidden = store.insert(
            format!("{prefix}.weight_hh"),
            glorot_uniform(rng, hidden, 4 * hidden),
        )?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.insert(format!("{prefix}.bias"), Tensor::row(&b))?;
        Ok(Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        })
    }

    pub fn existing(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_input = store.id(&format!("{prefix}.weight_ih"))?;
        let w_hidden = store.id(&format!("{prefix}.weight_hh"))?;
        let bias = store.id(&format!("{prefix}.bias"))?;
        let wi = store.get(w_input).shape();
        let hidden = store.get(w_hidden).shape()[0];
        if wi[1] != 4 * hidden {
            return Err(mismatch("Lstm::existing", wi, &[hidden, 4 * hidden]));
        }
        Ok(Self {
            w_input,
            w_hidden,
            bias,
            input: wi[0],
            hidden,
        })
    }

    pub fn bind<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore) -> BoundLstm {
        BoundLstm {
            wi: tape.param(store, self.w_input),
            wh: tape.param(store, self.w_hidden),
            b: tape.param(store, self.bias),
            hidden: self.hidden,
        }
    }
}

impl BoundLstm {
    /// One step for a batch: `x` is `B × input`, `h` and `c` are `B × hidden`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let xi = tape.matmul(x, self.wi)?;
        let hh = tape.matmul(h, self.wh)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_bias(pre, self.b)?;
        let i = tape.slice_cols(pre, 0, hd)?;
        let f = tape.slice_cols(pre, hd, hd)?;
        let g = tape.slice_cols(pre, 2 * hd, hd)?;
        let o = tape.slice_cols(pre, 3 * hd, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Scaled dot-product attention with row softmax: `softmax(QKᵀ/√d_k)·V`.
pub fn attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = tape.value(q).cols();
    let (sk, dk2) = (tape.value(k).rows(), tape.value(k).cols());
    if dk != dk2 || sk != tape.value(v).rows() {
        return Err(mismatch("attention", tape.shape(q), tape.shape(k)));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Multi-head attention `Concat(head_1..head_h)·W^O`, with
/// `head_i = attention(X·W_i^Q, X·W_i^K, X·W_i^V)`.
///
/// The per-head projections are stored side by side in one matrix per role,
/// so head `i` owns columns `i·d .. (i+1)·d`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        input: usize,
        heads: usize,
        key_dim: usize,
        value_dim: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: Dense::new(store, rng, &format!("{prefix}.query"), input, heads * key_dim)?,
            key: Dense::new(store, rng, &format!("{prefix}.key"), input, heads * key_dim)?,
            value: Dense::new(store, rng, &format!("{prefix}.value"), input, heads * value_dim)?,
            output: Dense::new(store, rng, &format!("{prefix}.output"), heads * value_dim, output)?,
            heads,
            key_dim,
            value_dim,
        })
    }

    pub fn existing(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let query = Dense::existing(store, &format!("{prefix}.query"))?;
        let key = Dense::existing(store, &format!("{prefix}.key"))?;
        let value = Dense::existing(store, &format!("{prefix}.value"))?;
        let output = Dense::existing(store, &format!("{prefix}.output"))?;
        if heads == 0 || query.fan_out % heads != 0 || value.fan_out % heads != 0 {
            return Err(mismatch("MultiHeadAttention::existing", &[query.fan_out], &[heads]));
        }
        Ok(Self {
            key_dim: query.fan_out / heads,
            value_dim: value.fan_out / heads,
            query,
            key,
            value,
            output,
            heads,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out
    }

    /// Full self-attention over `seq` (`s × input`), one output row per
    /// input row.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, seq: Var) -> Result<Var> {
        let q = self.query.forward(tape, store, seq)?;
        let k = self.key.forward(tape, store, seq)?;
        let v = self.value.forward(tape, store, seq)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * self.key_dim, self.key_dim)?;
            let kh = tape.slice_cols(k, h * self.key_dim, self.key_dim)?;
            let vh = tape.slice_cols(v, h * self.value_dim, self.value_dim)?;
            heads.push(attention(tape, qh, kh, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.output.forward(tape, store, cat)
    }

    /// Batched variant that only evaluates the first row of each sequence.
    ///
    /// `tokens` stacks all sequences (`T × input`); `segments[b]` is the
    /// `(start, len)` of sequence `b`, whose first row is the query. Equal to
    /// row 0 of [`forward`](Self::forward) on each sequence.
    pub fn forward_first_rows<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        tokens: Var,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var> {
        let first: Vec<Option<usize>> = segments.iter().map(|&(s, _)| Some(s)).collect();
        let queries_in = tape.gather_rows(tokens, first)?;
        let q = self.query.forward(tape, store, queries_in)?;
        let k = self.key.forward(tape, store, tokens)?;
        let v = self.value.forward(tape, store, tokens)?;
        let pooled = tape.segment_attention(q, k, v, segments, self.heads)?;
        self.output.forward(tape, store, pooled)
    }
}
