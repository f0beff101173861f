//! Wengert tape for reverse-mode differentiation.
//!
//! Every forward op appends one node holding its value and the ids of its
//! parents. Parents always precede children, so walking the node list
//! backwards is a reverse topological order and each node is visited once.

use super::array::{gemm, moments, softmax_row, MASK_BIAS};
use super::{Array, NumericError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention work recorded while building a tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Query-key dot products, counted once per (query, key) pair regardless of head count.
    pub score_elements: u64,
    /// Multiply-adds spent on `QK^T` and `PV`: `2 * width` per score element.
    pub flops: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    BroadcastLeading(Var, usize),
    WeightedTimeSum { x: Var, weights: Vec<f64>, dims: [usize; 4] },
    GaussianLogProb { mean: Var, logstd: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stats: AttentionStats,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Array {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Array::zeros(&self.shapes[var.0]))
    }

    pub fn get_ref(&self, var: Var) -> Option<&Array> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> AttentionStats {
        self.stats
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data inputs).
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, parents: &[Var]) -> Result<Var, NumericError> {
        value.check_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x W^T + b` over the last axis of `x`, with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let inp = xv.last_dim();
        if wv.ndim() != 2 || wv.shape()[1] != inp {
            return Err(NumericError::Shape {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let out = wv.shape()[0];
        if let Some(b) = b {
            if self.value(b).len() != out {
                return Err(NumericError::Shape {
                    op: "linear",
                    lhs: wv.shape().to_vec(),
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let rows = xv.rows();
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in y.chunks_mut(out) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, inp, out, xv.data(), (inp, 1), wv.data(), (1, inp), &mut y, b.is_some());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let value = Array::new(shape, y)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", value, Op::Linear { x, w, b }, &parents)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumericError> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericError> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a constant (no gradient to `c`).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var, NumericError> {
        let xv = self.value(x);
        if c.len() != xv.len() {
            return Err(NumericError::Shape {
                op: "mul_const",
                lhs: xv.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = xv.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("mul_const", value, Op::MulConst(x, c), &[x])
    }

    /// Multiplies each last-axis vector of `x` by the matching constant weight.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, NumericError> {
        let xv = self.value(x);
        if weights.len() != xv.rows() {
            return Err(NumericError::Shape {
                op: "scale_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for (row, &w) in data.chunks_mut(d.max(1)).zip(&weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("scale_rows", value, Op::ScaleRows(x, weights), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericError> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumericError> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let value = Array::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericError> {
        let xv = self.value(x);
        let value = Array::scalar(xv.sum() / xv.len() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Unmasked softmax along the last axis. Masking inside attention is handled by
    /// [`Tape::attention`]; masked softmax on plain arrays lives on [`Array::softmax`].
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericError> {
        let value = self.value(x).softmax(None)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if d == 0 || gv.len() != d || bv.len() != d {
            return Err(NumericError::Shape {
                op: "layernorm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xhat.chunks_mut(d).enumerate() {
            let (mean, rs) = moments(row);
            rstd.push(rs);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rs;
                out[r * d + j] = *v * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Array::new(xv.shape().to_vec(), out)?;
        self.push(
            "layernorm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [B, Lq, W]`, `k, v: [B, Lk, W]`, `key_mask: [B * Lk]`. Masked keys get an
    /// additive [`MASK_BIAS`]; a query whose keys are all masked attends to nothing and
    /// yields zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var, NumericError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let bad = qv.ndim() != 3
            || kv.ndim() != 3
            || kv.shape() != vv.shape()
            || qv.shape()[0] != kv.shape()[0]
            || qv.shape()[2] != kv.shape()[2];
        if bad {
            return Err(NumericError::Shape {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (b, lq, w) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        if key_mask.len() != b * lk {
            return Err(NumericError::Shape {
                op: "attention",
                lhs: kv.shape().to_vec(),
                rhs: vec![key_mask.len()],
            });
        }
        if heads == 0 || w % heads != 0 {
            return Err(NumericError::InvalidShape {
                op: "attention",
                reason: format!("width {w} not divisible by {heads} heads"),
            });
        }
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * w];
        for bi in 0..b {
            let mask = &key_mask[bi * lk..(bi + 1) * lk];
            let any = mask.iter().any(|&m| m);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let p = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    if !any {
                        continue;
                    }
                    let qrow = &qd[(bi * lq + i) * w + off..][..dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd[(bi * lk + j) * w + off..][..dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum();
                        *pj = dot * scale + if mask[j] { 0.0 } else { MASK_BIAS };
                    }
                    softmax_row(p, |j| mask[j]);
                    let orow = &mut out[(bi * lq + i) * w + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != 0.0 {
                            let vrow = &vd[(bi * lk + j) * w + off..][..dh];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += pj * vv;
                            }
                        }
                    }
                }
            }
        }
        let scores = (b * lq * lk) as u64;
        self.stats.score_elements += scores;
        self.stats.flops += scores * 2 * w as u64;
        let value = Array::new(vec![b, lq, w], out)?;
        self.push("attention", value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericError> {
        let value = self.value(x).permute(perm)?;
        self.push("permute", value, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericError> {
        let arrays: Vec<&Array> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Array::concat(&arrays, axis)?;
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, NumericError> {
        let value = self.value(x).index_select(axis, indices)?;
        self.push(
            "index_select",
            value,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, n: usize) -> Result<Var, NumericError> {
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let data = xv.data().repeat(n);
        let value = Array::new(shape, data)?;
        self.push("broadcast", value, Op::BroadcastLeading(x, n), &[x])
    }

    /// `out[p, q, :] = sum_t weights[p, t, q] * x[p, t, q, :]` for `x: [P, T, Q, D]`.
    pub fn weighted_time_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, NumericError> {
        let xv = self.value(x);
        if xv.ndim() != 4 || weights.len() * xv.shape()[3] != xv.len() {
            return Err(NumericError::Shape {
                op: "weighted_time_sum",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let [p, t, q, d] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let mut out = vec![0.0; p * q * d];
        for pi in 0..p {
            for ti in 0..t {
                for qi in 0..q {
                    let w = weights[(pi * t + ti) * q + qi];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &xv.data()[((pi * t + ti) * q + qi) * d..][..d];
                    let dst = &mut out[(pi * q + qi) * d..][..d];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        let value = Array::new(vec![p, q, d], out)?;
        self.push(
            "weighted_time_sum",
            value,
            Op::WeightedTimeSum {
                x,
                weights,
                dims: [p, t, q, d],
            },
            &[x],
        )
    }

    /// Diagonal-Gaussian log density summed over all but the leading axis.
    ///
    /// `mean`, `logstd`: `[R, ...]`; `target` is a constant of the same shape.
    /// Returns `[R]`.
    pub fn gaussian_log_prob(&mut self, mean: Var, logstd: Var, target: &Array) -> Result<Var, NumericError> {
        self.same_shape("gaussian_log_prob", mean, logstd)?;
        let (mv, sv) = (self.value(mean), self.value(logstd));
        if mv.shape() != target.shape() || mv.ndim() == 0 {
            return Err(NumericError::Shape {
                op: "gaussian_log_prob",
                lhs: mv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let r = mv.shape()[0];
        let per = mv.len() / r.max(1);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut out = vec![0.0; r];
        for (i, o) in out.iter_mut().enumerate() {
            for j in i * per..(i + 1) * per {
                let z = (target.data()[j] - mv.data()[j]) * (-sv.data()[j]).exp();
                *o += -0.5 * z * z - sv.data()[j] - half_log_2pi;
            }
        }
        let value = Array::new(vec![r], out)?;
        self.push(
            "gaussian_log_prob",
            value,
            Op::GaussianLogProb {
                mean,
                logstd,
                target: target.data().to_vec(),
            },
            &[mean, logstd],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for p in parents(&node.op) {
                if p.0 >= i {
                    return Err(NumericError::CyclicTape { node: i, parent: p.0 });
                }
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let nd = &self.nodes[v.0];
            if !nd.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| Array::zeros(nd.value.shape()));
            f(buf.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, av.data(), (1, k), gd, (n, 1), gb, true));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, inp, out) = (xv.rows(), xv.last_dim(), wv.shape()[0]);
                acc(*x, &mut |gx| gemm(rows, out, inp, gd, (out, 1), wv.data(), (inp, 1), gx, true));
                acc(*w, &mut |gw| gemm(out, rows, inp, gd, (1, out), xv.data(), (inp, 1), gw, true));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for r in gd.chunks(out) {
                            for (o, v) in gb.iter_mut().zip(r) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, v), y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += v * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, v), x) in gb.iter_mut().zip(gd).zip(av) {
                        *o += v * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(gd).for_each(|(o, v)| *o += c * v)),
            Op::MulConst(x, c) => acc(*x, &mut |gx| {
                for ((o, v), k) in gx.iter_mut().zip(gd).zip(c) {
                    *o += v * k;
                }
            }),
            Op::ScaleRows(x, w) => {
                let d = val(*x).last_dim().max(1);
                acc(*x, &mut |gx| {
                    for ((orow, grow), k) in gx.chunks_mut(d).zip(gd.chunks(d)).zip(w) {
                        for (o, v) in orow.iter_mut().zip(grow) {
                            *o += k * v;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, v), xi) in gx.iter_mut().zip(gd).zip(xv) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, v), xi) in gx.iter_mut().zip(gd).zip(xv) {
                        if *xi >= *lo && *xi <= *hi {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += gd[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += gd[0] / n));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim().max(1);
                acc(*x, &mut |gx| {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim().max(1);
                acc(*x, &mut |gx| {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                acc(*gain, &mut |gg| {
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), b) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += a * b;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in gd.chunks(d) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = d as f64;
                    for (r, ((orow, grow), hrow)) in gx.chunks_mut(d).zip(gd.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            orow[j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gd, grads);
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, gd)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = g.permute(&inv).expect("inverse permutation");
                acc(*x, &mut |gx| add_into(gx, back.data()));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &gd[o * total + start..o * total + start + chunk]);
                        }
                    });
                    start += chunk;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let n = xs[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for (r, &src) in indices.iter().enumerate() {
                            let from = (o * indices.len() + r) * inner;
                            add_into(&mut gx[(o * n + src) * inner..][..inner], &gd[from..from + inner]);
                        }
                    }
                });
            }
            Op::BroadcastLeading(x, n) => {
                let m = val(*x).len();
                acc(*x, &mut |gx| {
                    for r in 0..*n {
                        add_into(gx, &gd[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::WeightedTimeSum { x, weights, dims } => {
                let [p, t, q, d] = *dims;
                acc(*x, &mut |gx| {
                    for pi in 0..p {
                        for ti in 0..t {
                            for qi in 0..q {
                                let w = weights[(pi * t + ti) * q + qi];
                                let dst = &mut gx[((pi * t + ti) * q + qi) * d..][..d];
                                let src = &gd[(pi * q + qi) * d..][..d];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o += w * s;
                                }
                            }
                        }
                    }
                });
            }
            Op::GaussianLogProb { mean, logstd, target } => {
                let (mv, sv) = (val(*mean).data(), val(*logstd).data());
                let per = mv.len() / gd.len().max(1);
                acc(*mean, &mut |gm| {
                    for (j, o) in gm.iter_mut().enumerate() {
                        let inv_var = (-2.0 * sv[j]).exp();
                        *o += gd[j / per] * (target[j] - mv[j]) * inv_var;
                    }
                });
                acc(*logstd, &mut |gs| {
                    for (j, o) in gs.iter_mut().enumerate() {
                        let z = (target[j] - mv[j]) * (-sv[j]).exp();
                        *o += gd[j / per] * (z * z - 1.0);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[f64], gd: &[f64], grads: &mut [Option<Array>]) {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (b, lq, w) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let p = &probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let go = &gd[(bi * lq + i) * w + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv.data()[(bi * lk + j) * w + off..][..dh];
                        dp[j] = go.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += p[j] * dp[j];
                        let gvrow = &mut gv[(bi * lk + j) * w + off..][..dh];
                        for (o, g) in gvrow.iter_mut().zip(go) {
                            *o += p[j] * g;
                        }
                    }
                    let qrow_off = (bi * lq + i) * w + off;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let krow_off = (bi * lk + j) * w + off;
                        for c in 0..dh {
                            gq[qrow_off + c] += ds * kv.data()[krow_off + c];
                            gk[krow_off + c] += ds * qv.data()[qrow_off + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            let nd = &self.nodes[var.0];
            if !nd.requires_grad {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| Array::zeros(nd.value.shape()));
            add_into(slot.data_mut(), &buf);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
        Op::Scale(x, _)
        | Op::MulConst(x, _)
        | Op::ScaleRows(x, _)
        | Op::Relu(x)
        | Op::Clamp { x, .. }
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::IndexSelect { x, .. }
        | Op::BroadcastLeading(x, _)
        | Op::WeightedTimeSum { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::Concat(parts, _) => parts.clone(),
        Op::GaussianLogProb { mean, logstd, .. } => vec![*mean, *logstd],
    }
}
