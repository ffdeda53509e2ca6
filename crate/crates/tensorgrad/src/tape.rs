//! Reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so walking them backwards is a valid reverse
//! topological order and each node is visited exactly once. Parameters are
//! borrowed from the [`ParamStore`] rather than copied.

use std::borrow::Cow;

use crate::error::{mismatch, Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Sum(Var),
    StraightThrough(Var),
    SegmentAttention(Box<SegmentAttention>),
}

#[derive(Debug)]
struct SegmentAttention {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<(usize, usize)>,
    heads: usize,
    /// Attention weights, laid out per (query row, head) over the segment.
    weights: Vec<f64>,
    /// Offset of each (row, head) block inside `weights`.
    offsets: Vec<usize>,
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation graph for one forward pass.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    track: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A tape that never records gradient requirements; for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad: needs_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_rank2() {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("expected rank-2 input, got {:?}", t.shape()),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, store: &'p ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            Layout::plain(m, k),
            self.value(a).data(),
            Layout::plain(k, n),
            self.value(b).data(),
            out.data_mut(),
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.rank2("transpose", a)?;
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Adds a `1 × n` bias to every row of an `m × n` input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.rank2("add_bias", x)?;
        if self.shape(b) != [1, n] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op_name, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `i` of an `m × n` input by `c[i]`, where `c` is `m × 1`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.rank2("mul_col", x)?;
        if self.shape(c) != [m, 1] {
            return Err(mismatch("mul_col", self.shape(x), self.shape(c)));
        }
        let mut out = self.value(x).clone();
        let col = self.value(c).data().to_vec();
        if n > 0 {
            for (row, s) in out.data_mut().chunks_mut(n).zip(&col) {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(out, Op::MulCol(x, c), ng))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.rank2("softmax_rows", x)?;
        let mut out = self.value(x).clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.rank2("log_softmax_rows", x)?;
        let mut out = self.value(x).clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), ng))
    }

    /// Selects column `idx[i]` from row `i`, giving an `m × 1` result.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (m, n) = self.rank2("pick", x)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                reason: format!("{} indices into {m}×{n}", idx.len()),
            });
        }
        let v = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| v.get(i, j)).collect();
        let out = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Pick(x, idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (m, _) = self.rank2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if r != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2("slice_cols", x)?;
        if start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} of {n}", start + len),
            });
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    /// Row `r` of the output is row `idx[r]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = self.rank2("gather_rows", x)?;
        if idx.iter().flatten().any(|&r| r >= m) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row index out of range for {m} rows"),
            });
        }
        let v = self.value(x);
        let mut data = vec![0.0; idx.len() * n];
        for (r, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                data[r * n..(r + 1) * n].copy_from_slice(&v.data()[s * n..(s + 1) * n]);
            }
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, idx), ng))
    }

    /// Sum of all elements as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if self.shape(soft) != hard.shape() {
            return Err(mismatch("straight_through", self.shape(soft), hard.shape()));
        }
        let ng = self.ng(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), ng))
    }

    /// Batched multi-head scaled dot-product attention where each query row
    /// attends over its own contiguous segment of key/value rows.
    ///
    /// `q` is `B × (heads·dk)`, `k` is `T × (heads·dk)`, `v` is
    /// `T × (heads·dv)`; `segments[b] = (start, len)` selects the key/value
    /// rows for query `b`. The result is `B × (heads·dv)` with head outputs
    /// concatenated in head order.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
    ) -> Result<Var> {
        let (b, qw) = self.rank2("segment_attention", q)?;
        let (t, kw) = self.rank2("segment_attention", k)?;
        let (t2, vw) = self.rank2("segment_attention", v)?;
        if qw != kw || t != t2 || heads == 0 || qw % heads != 0 || vw % heads != 0 {
            return Err(mismatch("segment_attention", self.shape(q), self.shape(k)));
        }
        if segments.len() != b || segments.iter().any(|&(s, l)| l == 0 || s + l > t) {
            return Err(TensorError::InvalidArgument {
                op: "segment_attention",
                reason: "every query needs a non-empty in-range segment".into(),
            });
        }
        let dk = qw / heads;
        let dv = vw / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; b * vw];
        let mut weights = Vec::new();
        let mut offsets = Vec::with_capacity(b * heads);
        for (bi, &(start, len)) in segments.iter().enumerate() {
            for h in 0..heads {
                offsets.push(weights.len());
                let qrow = &qd[bi * qw + h * dk..bi * qw + (h + 1) * dk];
                let w0 = weights.len();
                for tok in start..start + len {
                    let krow = &kd[tok * kw + h * dk..tok * kw + (h + 1) * dk];
                    weights.push(scale * dot(qrow, krow));
                }
                softmax_in_place(&mut weights[w0..]);
                let orow = &mut out[bi * vw + h * dv..bi * vw + (h + 1) * dv];
                for (j, tok) in (start..start + len).enumerate() {
                    let a = weights[w0 + j];
                    let vrow = &vd[tok * vw + h * dv..tok * vw + (h + 1) * dv];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += a * x;
                    }
                }
            }
        }
        let out = Tensor::matrix(b, vw, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::SegmentAttention(Box::new(SegmentAttention {
                q,
                k,
                v,
                segments,
                heads,
                weights,
                offsets,
            })),
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`, returning per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Constant) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads, &mut params);
        }
        Ok(NodeGrads { grads, params })
    }

    /// Backward pass that adds parameter gradients into `into`.
    pub fn backward_into(&self, loss: Var, into: &mut Gradients) -> Result<()> {
        let ng = self.backward(loss)?;
        ng.accumulate(into);
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<'p>,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Vec<(ParamId, Tensor)>,
    ) {
        let y = &*node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.push((*id, g)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.ng(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(
                        Layout::plain(m, n),
                        g.data(),
                        Layout::transposed_of(k, n),
                        vb.data(),
                        da.data_mut(),
                        0.0,
                    );
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(
                        Layout::transposed_of(m, k),
                        va.data(),
                        Layout::plain(m, n),
                        g.data(),
                        db.data_mut(),
                        0.0,
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::AddBias(x, b) => {
                if self.ng(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    if n > 0 {
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    self.acc(grads, *b, Tensor::row(&db));
                }
                self.acc(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, hadamard(&g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, hadamard(&g, self.value(*a)));
                }
            }
            Op::MulCol(x, c) => {
                let (vx, vc) = (self.value(*x), self.value(*c));
                let n = vx.cols();
                if self.ng(*c) {
                    let dc: Vec<f64> = (0..vx.rows())
                        .map(|i| dot(&g.data()[i * n..(i + 1) * n], vx.row_slice(i)))
                        .collect();
                    self.acc(grads, *c, Tensor::matrix(vx.rows(), 1, dc).unwrap());
                }
                if self.ng(*x) {
                    let mut dx = g;
                    if n > 0 {
                        for (row, s) in dx.data_mut().chunks_mut(n).zip(vc.data()) {
                            row.iter_mut().for_each(|v| *v *= s);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = zip_map(&g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 });
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => self.acc(grads, *x, zip_map(&g, y, |gv, t| gv * (1.0 - t * t))),
            Op::Sigmoid(x) => self.acc(grads, *x, zip_map(&g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Exp(x) => self.acc(grads, *x, hadamard(&g, y)),
            Op::Log(x) => self.acc(grads, *x, zip_map(&g, self.value(*x), |gv, v| gv / v)),
            Op::Square(x) => self.acc(grads, *x, zip_map(&g, self.value(*x), |gv, v| 2.0 * gv * v)),
            Op::SoftmaxRows(x) => {
                let n = y.cols();
                let mut d = g;
                if n > 0 {
                    for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let s = dot(drow, yrow);
                        for (dv, yv) in drow.iter_mut().zip(yrow) {
                            *dv = yv * (*dv - s);
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let n = y.cols();
                let mut d = g;
                if n > 0 {
                    for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let s: f64 = drow.iter().sum();
                        for (dv, yv) in drow.iter_mut().zip(yrow) {
                            *dv -= yv.exp() * s;
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Pick(x, idx) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let n = xv.cols();
                for (i, &j) in idx.iter().enumerate() {
                    d.data_mut()[i * n + j] += g.data()[i];
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::matrix(m, w, data).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut d = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    d.data_mut()[i * n + start..i * n + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, d);
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (r, src) in idx.iter().enumerate() {
                    if let Some(s) = src {
                        for c in 0..n {
                            d.data_mut()[s * n + c] += g.data()[r * n + c];
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::StraightThrough(soft) => self.acc(grads, *soft, g),
            Op::SegmentAttention(att) => self.segment_attention_backward(att, &g, grads),
        }
    }

    fn segment_attention_backward(
        &self,
        att: &SegmentAttention,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(att.q), self.value(att.k), self.value(att.v));
        let heads = att.heads;
        let (qw, vw) = (qv.cols(), vv.cols());
        let (dk, dv) = (qw / heads, vw / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = Tensor::zeros(qv.shape());
        let mut dkm = Tensor::zeros(kv.shape());
        let mut dvm = Tensor::zeros(vv.shape());
        let mut ds = Vec::new();
        for (bi, &(start, len)) in att.segments.iter().enumerate() {
            for h in 0..heads {
                let w = &att.weights[att.offsets[bi * heads + h]..][..len];
                let grow = &g.data()[bi * vw + h * dv..bi * vw + (h + 1) * dv];
                ds.clear();
                for (j, tok) in (start..start + len).enumerate() {
                    let vrow = &vv.data()[tok * vw + h * dv..tok * vw + (h + 1) * dv];
                    ds.push(dot(grow, vrow));
                    let dvrow = &mut dvm.data_mut()[tok * vw + h * dv..tok * vw + (h + 1) * dv];
                    for (d, &gx) in dvrow.iter_mut().zip(grow) {
                        *d += w[j] * gx;
                    }
                }
                let wsum = dot(w, &ds);
                for (d, &a) in ds.iter_mut().zip(w) {
                    *d = a * (*d - wsum) * scale;
                }
                let qrow = &qv.data()[bi * qw + h * dk..bi * qw + (h + 1) * dk];
                for (j, tok) in (start..start + len).enumerate() {
                    let krow = &kv.data()[tok * qw + h * dk..tok * qw + (h + 1) * dk];
                    let dqrow = &mut dq.data_mut()[bi * qw + h * dk..bi * qw + (h + 1) * dk];
                    for (d, &kx) in dqrow.iter_mut().zip(krow) {
                        *d += ds[j] * kx;
                    }
                    let dkrow = &mut dkm.data_mut()[tok * qw + h * dk..tok * qw + (h + 1) * dk];
                    for (d, &qx) in dkrow.iter_mut().zip(qrow) {
                        *d += ds[j] * qx;
                    }
                }
            }
        }
        self.acc(grads, att.q, dq);
        self.acc(grads, att.k, dkm);
        self.acc(grads, att.v, dvm);
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl NodeGrads {
    /// Gradient of the loss with respect to a leaf created by
    /// [`Tape::input`]. Intermediate gradients are consumed during the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&self, into: &mut Gradients) {
        for (id, g) in &self.params {
            into.get_mut(*id).add_assign(g);
        }
    }
}

impl<'p> Tape<'p> {
    /// A leaf that is not a parameter but whose gradient should be kept,
    /// e.g. a network input probed by a gradient check.
    pub fn input(&mut self, value: Tensor) -> Var {
        let track = self.track;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Constant,
            needs_grad: track,
        });
        Var(self.nodes.len() - 1)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
