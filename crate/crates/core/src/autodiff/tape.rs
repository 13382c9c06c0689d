//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its vector-Jacobian product. `backward` walks the
//! nodes in strict reverse creation order and sums contributions into
//! each parent's gradient.

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{LabError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a grouped-query causal attention call.
///
/// Query rows are laid out `[batch, seq, heads, head_dim]`, key/value
/// rows `[batch, seq, kv_heads, head_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    fn check(&self) -> Result<()> {
        if self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) || self.head_dim == 0 {
            return Err(LabError::config(
                "attention",
                format!("heads {} not divisible by kv heads {}", self.heads, self.kv_heads),
            ));
        }
        Ok(())
    }
}

/// Geometry of a rotary embedding call: rows `[batch, seq]`, columns
/// `[heads, head_dim]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeDims {
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub base: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<f64>,
    },
    Rope {
        x: Var,
        dims: RopeDims,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Column(Var, usize),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    MulRows(Var, Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_fault: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> LabError {
    LabError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rope_angles(pos: usize, i: usize, dims: &RopeDims) -> (f64, f64) {
    let half = dims.head_dim / 2;
    let inv_freq = dims.base.powf(-(i as f64) / half as f64);
    let theta = pos as f64 * inv_freq;
    (theta.cos(), theta.sin())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: makes ReLU backward pass gradient through negative inputs.
    pub fn inject_relu_fault(&mut self) {
        self.relu_fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        value.set_grad(None);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Same value, detached from the graph.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Value-only `x > 0` mask; never part of the graph.
    pub fn indicator_mask(&self, x: Var) -> Vec<bool> {
        self.data(x).iter().map(|&v| v > 0.0).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise RMS normalization with a learned gain of length `cols`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let d = tx.cols();
        if tw.numel() != d {
            return Err(shape_err("rms_norm", tx, tw));
        }
        let mut out = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for (xr, yr) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for ((y, &xv), &w) in yr.iter_mut().zip(xr).zip(tw.data()) {
                *y = xv * r * w;
            }
            inv_rms.push(r);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(out, Op::RmsNorm { x, weight, inv_rms }, rg))
    }

    /// Row lookup into a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(LabError::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal scaled-dot-product attention with grouped key/value heads.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, dims: AttentionDims) -> Result<Var> {
        dims.check()?;
        let AttentionDims {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        } = dims;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let q_cols = heads * head_dim;
        let kv_cols = kv_heads * head_dim;
        if tq.shape() != [batch * seq, q_cols] {
            return Err(LabError::Shape {
                op: "attention.q",
                left: tq.shape().to_vec(),
                right: vec![batch * seq, q_cols],
            });
        }
        if tk.shape() != [batch * seq, kv_cols] || tv.shape() != tk.shape() {
            return Err(shape_err("attention.kv", tk, tv));
        }
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let per_kv = heads / kv_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * q_cols];
        for b in 0..batch {
            for h in 0..heads {
                let g = h / per_kv;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * q_cols + h * head_dim..][..head_dim];
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * kv_cols + g * head_dim..][..head_dim];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for p in prow[..=i].iter_mut() {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    let oi = &mut out[(b * seq + i) * q_cols + h * head_dim..][..head_dim];
                    for j in 0..=i {
                        prow[j] /= total;
                        let vj = &vd[(b * seq + j) * kv_cols + g * head_dim..][..head_dim];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += prow[j] * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * seq, q_cols], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, rg))
    }

    /// Rotary position embedding applied per head with the half-split pairing.
    pub fn rope(&mut self, x: Var, dims: RopeDims) -> Result<Var> {
        let t = self.value(x);
        let cols = dims.heads * dims.head_dim;
        if t.cols() != cols || !dims.head_dim.is_multiple_of(2) || !t.rows().is_multiple_of(dims.seq.max(1)) {
            return Err(LabError::Shape {
                op: "rope",
                left: t.shape().to_vec(),
                right: vec![dims.seq, cols],
            });
        }
        let half = dims.head_dim / 2;
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let pos = r % dims.seq;
            for h in 0..dims.heads {
                let head = &mut row[h * dims.head_dim..][..dims.head_dim];
                for i in 0..half {
                    let (c, s) = rope_angles(pos, i, &dims);
                    let (x1, x2) = (head[i], head[i + half]);
                    head[i] = x1 * c - x2 * s;
                    head[i + half] = x1 * s + x2 * c;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rope { x, dims }, rg))
    }

    /// Mean token-level cross entropy of `[n × vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, vocab) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(LabError::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= vocab) {
            return Err(LabError::Input(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &tgt) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            loss -= (row[tgt] / total).ln();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Column means: `[n × c] -> [1 × c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), rg)
    }

    /// Single column as `[n × 1]`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let t = self.value(x);
        if col >= t.cols() {
            return Err(LabError::Input(format!("column {col} of {:?}", t.shape())));
        }
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks(c).map(|r| r[col]).collect();
        let n = data.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, 1], data), Op::Column(x, col), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(LabError::Input(format!("row {bad} of {:?}", t.shape())));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// `out[idx[r]] += x[r]` into a zero `[rows × c]` matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(LabError::Input(format!(
                "scatter of {:?} into {rows} rows with {} indices",
                t.shape(),
                idx.len()
            )));
        }
        let mut out = vec![0.0; rows * c];
        for (r, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(t.row(r))
                .for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterAddRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Scales row `r` of `x` by `s[r]` where `s` is `[n × 1]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != tx.rows() {
            return Err(shape_err("mul_rows", tx, ts));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for (row, &sv) in out.chunks_mut(c).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulRows(x, s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(LabError::Shape {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a single-element `loss`. Gradients of every node
    /// requiring one are written into that node's tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(LabError::Usage(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad();
        // Borrow the parent's accumulator, allocating zeros on first touch.
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, acc(grads, nodes, *a));
                }
                if wants(*b) {
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, acc(grads, nodes, *b));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if wants(*b) {
                    acc(grads, nodes, *b)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += sign * gv);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let d = acc(grads, nodes, *a);
                    for ((d, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if wants(*b) {
                    let d = acc(grads, nodes, *b);
                    for ((d, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let d = acc(grads, nodes, *a);
                    for ((d, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv / bv;
                    }
                }
                if wants(*b) {
                    let d = acc(grads, nodes, *b);
                    for (((d, gv), av), bv) in d.iter_mut().zip(g).zip(ta.data()).zip(tb.data()) {
                        *d -= gv * av / (bv * bv);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::Exp(x) => {
                if wants(*x) {
                    let d = acc(grads, nodes, *x);
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y;
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let d = acc(grads, nodes, *x);
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(tx.data()) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let fault = self.relu_fault;
                    let d = acc(grads, nodes, *x);
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 || fault {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let d = acc(grads, nodes, *x);
                    for ((d, gv), &xv) in d.iter_mut().zip(g).zip(tx.data()) {
                        let s = sigmoid(xv);
                        *d += gv * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let c = out.cols();
                    let d = acc(grads, nodes, *x);
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (tx, tw) = (val(*x), val(*weight));
                let dcols = tx.cols();
                if wants(*x) {
                    let d = acc(grads, nodes, *x);
                    for (((dr, gr), xr), &r) in d
                        .chunks_mut(dcols)
                        .zip(g.chunks(dcols))
                        .zip(tx.data().chunks(dcols))
                        .zip(inv_rms)
                    {
                        let gx: f64 = gr
                            .iter()
                            .zip(tw.data())
                            .zip(xr)
                            .map(|((gv, w), xv)| gv * w * xv)
                            .sum::<f64>()
                            / dcols as f64;
                        for (((dv, gv), w), xv) in dr.iter_mut().zip(gr).zip(tw.data()).zip(xr) {
                            *dv += r * (gv * w - xv * r * r * gx);
                        }
                    }
                }
                if wants(*weight) {
                    let d = acc(grads, nodes, *weight);
                    for ((gr, xr), &r) in g.chunks(dcols).zip(tx.data().chunks(dcols)).zip(inv_rms) {
                        for ((dv, gv), xv) in d.iter_mut().zip(gr).zip(xr) {
                            *dv += gv * xv * r;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let dcols = out.cols();
                    let d = acc(grads, nodes, *table);
                    for (gr, &id) in g.chunks(dcols).zip(ids) {
                        d[id * dcols..(id + 1) * dcols]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(dv, gv)| *dv += gv);
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                self.attention_backward(*q, *k, *v, dims, probs, g, grads);
            }
            Op::Rope { x, dims } => {
                if wants(*x) {
                    let cols = dims.heads * dims.head_dim;
                    let half = dims.head_dim / 2;
                    let d = acc(grads, nodes, *x);
                    for (r, (dr, gr)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let pos = r % dims.seq;
                        for h in 0..dims.heads {
                            let off = h * dims.head_dim;
                            for i in 0..half {
                                let (c, s) = rope_angles(pos, i, dims);
                                let (g1, g2) = (gr[off + i], gr[off + i + half]);
                                dr[off + i] += g1 * c + g2 * s;
                                dr[off + i + half] += -g1 * s + g2 * c;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let tl = val(*logits);
                    let vocab = tl.cols();
                    let scale = g[0] / targets.len() as f64;
                    let d = acc(grads, nodes, *logits);
                    for ((dr, pr), &tgt) in d.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                        for (j, (dv, p)) in dr.iter_mut().zip(pr).enumerate() {
                            let y = if j == tgt { 1.0 } else { 0.0 };
                            *dv += scale * (p - y);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).numel() as f64;
                    acc(grads, nodes, *x).iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let (n, c) = (tx.rows() as f64, tx.cols());
                    let d = acc(grads, nodes, *x);
                    for dr in d.chunks_mut(c) {
                        dr.iter_mut().zip(g).for_each(|(dv, gv)| *dv += gv / n);
                    }
                }
            }
            Op::Column(x, col) => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let d = acc(grads, nodes, *x);
                    for (dr, gv) in d.chunks_mut(c).zip(g) {
                        dr[*col] += gv;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let c = out.cols();
                    let d = acc(grads, nodes, *x);
                    for (gr, &row) in g.chunks(c).zip(idx) {
                        d[row * c..(row + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(dv, gv)| *dv += gv);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if wants(*x) {
                    let c = out.cols();
                    let d = acc(grads, nodes, *x);
                    for (dr, &row) in d.chunks_mut(c).zip(idx) {
                        dr.iter_mut()
                            .zip(&g[row * c..(row + 1) * c])
                            .for_each(|(dv, gv)| *dv += gv);
                    }
                }
            }
            Op::MulRows(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let c = tx.cols();
                if wants(*x) {
                    let d = acc(grads, nodes, *x);
                    for ((dr, gr), &sv) in d.chunks_mut(c).zip(g.chunks(c)).zip(ts.data()) {
                        dr.iter_mut().zip(gr).for_each(|(dv, gv)| *dv += gv * sv);
                    }
                }
                if wants(*s) {
                    let d = acc(grads, nodes, *s);
                    for ((dv, gr), xr) in d.iter_mut().zip(g.chunks(c)).zip(tx.data().chunks(c)) {
                        *dv += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        dims: &AttentionDims,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionDims {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        } = *dims;
        let q_cols = heads * head_dim;
        let kv_cols = kv_heads * head_dim;
        let per_kv = heads / kv_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let gk = h / per_kv;
                for i in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[(b * seq + i) * q_cols + h * head_dim..][..head_dim];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vo = (b * seq + j) * kv_cols + gk * head_dim;
                        let vj = &vd[vo..vo + head_dim];
                        dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                        dot += prow[j] * dp[j];
                        for (dvv, gv) in dv[vo..vo + head_dim].iter_mut().zip(go) {
                            *dvv += prow[j] * gv;
                        }
                    }
                    let qo = (b * seq + i) * q_cols + h * head_dim;
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (b * seq + j) * kv_cols + gk * head_dim;
                        for t in 0..head_dim {
                            dq[qo + t] += ds * kd[ko + t];
                            dk[ko + t] += ds * qd[qo + t];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                let d = grads[var.0].get_or_insert_with(|| vec![0.0; delta.len()]);
                d.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.data(y), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(mat(&[vec![1.0, 2.0]]));
        let c = tape.constant(mat(&[vec![3.0], vec![4.0]]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.data(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![-0.3, 0.0, 0.7]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 0.7]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // subgradient 0 at exactly 0
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![-1.0, -2.0, -0.5]).unwrap());
        let y = tape.relu(x);
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
        let y = tape.softmax_rows(x);
        let d = tape.data(y);
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 1.0).abs() < 1e-12 && d[3] >= 0.0 && d[3] < 1e-300);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.data(sx), tape.data(x));
        let y = tape.mul(sx, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert!(tape.grad(sx).is_none());

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sx = tape.stop_gradient(x);
        let s = tape.sum(sx);
        tape.backward(s).unwrap();
        // x is unreachable from the loss
        assert!(tape.grad(x).is_none_or(|g| g == [0.0]));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.7));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::zeros(&[4, 2]));
        assert!(tape.embedding(t, &[0, 4]).is_err());
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 7]));
        let l = tape.cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).item() - (7f64).ln()).abs() < 1e-14);
    }
}
