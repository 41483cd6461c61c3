//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs to produce input partials. Node ids grow monotonically, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Score assigned to masked attention positions before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

/// Epsilon used inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floor applied to probabilities before taking logarithms in losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `[queries, keys]` matrix; `true` means the query may attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for i in 0..queries {
            for j in 0..keys {
                allowed.push(f(i, j));
            }
        }
        Self {
            queries,
            keys,
            allowed,
        }
    }

    /// Standard key-padding mask: every query sees exactly the kept keys.
    pub fn key_padding(queries: usize, keep: &[bool]) -> Self {
        Self::from_fn(queries, keep.len(), |_, j| keep[j])
    }

    /// Lower-triangular mask over a single sequence.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |i, j| j <= i)
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }
}

/// Test hook that scales the input partials of one operation kind during
/// backward, so gradient checks can be shown to catch a broken rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        src: Var,
        index: Vec<Option<usize>>,
    },
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    BinaryCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Attention { .. } => "attention",
            Op::Sum(_) => "sum",
            Op::Focal { .. } => "focal",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation. Single-use: `backward` consumes it logically.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<BackwardFault>,
}

/// Result of a backward pass: one gradient per trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf that required grad; `None` for anything else.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but takes ownership.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inner product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn out_shape_with_cols(shape: &[usize], cols: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = cols;
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. It is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_raw(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), needs)
    }

    /// Adds a bias vector to every row of `x`. The only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), data);
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::from_raw(out_shape_with_cols(ta.shape(), n), out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_raw(out_shape_with_cols(self.value(first).shape(), total), data);
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks matrices with equal column counts into `[sum rows, cols]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::from_raw(vec![rows, cols], data);
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Builds `[index.len(), cols]` from selected rows; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            match i {
                Some(i) if i < rows => data.extend_from_slice(t.row(i)),
                Some(i) => {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} out of range for {rows} rows"
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let out = Tensor::from_raw(vec![index.len(), cols], data);
        let needs = self.needs(&[src]);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut normalized = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let nv = (v - mean) * is;
                normalized.push(nv);
                out.push(nv * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out);
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Inverted dropout. `rng = None` means evaluation mode (identity).
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0,1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    ///
    /// `q: [nq, d]`, `k, v: [nk, d]`. Each head sees a contiguous `d / heads`
    /// slice and scores are scaled by `1 / sqrt(d / heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::HeadCount { heads, dim: d });
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: tk.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        if let Some(m) = mask {
            if m.shape() != (nq, nk) {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![nq, nk],
                    rhs: vec![m.shape().0, m.shape().1],
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p = if mask.is_none_or(|m| m.allows(i, j)) {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        dot(qi, kj) * scale
                    } else {
                        MASKED_SCORE
                    };
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, vv) in orow.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let out = Tensor::from_raw(vec![nq, d], out);
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of the per-entry focal binary cross-entropy terms.
    ///
    /// For probability `p = sigmoid(logit)` and target `y`, with
    /// `p_t = y ? p : 1 - p` and `a_t = y ? alpha : 1 - alpha`, each entry
    /// contributes `-a_t (1 - p_t)^gamma ln(max(p_t, 1e-12))`.
    pub fn focal_loss_sum(&mut self, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "focal_loss",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| focal_term(z, y, alpha, gamma).0)
            .sum();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            needs,
        ))
    }

    /// Sum over rows of softmax cross-entropy against class indices.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.cols();
        if t.rows() != targets.len() || targets.iter().any(|&y| y >= c) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (row, (chunk, &y)) in t.data().chunks(c).zip(targets).enumerate() {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - chunk[y];
            softmax_in_place(&mut probs[row * c..(row + 1) * c]);
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// with both logarithms clamped at `1e-12`.
    pub fn binary_cross_entropy_sum(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                -(y * p.max(LOG_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln())
            })
            .sum();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    ///
    /// Leaves that require grad but do not influence `loss` get zeros.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let mut contributions = self.local_partials(id, &gout);
            if let Some(fault) = self.fault {
                if fault.op == node.op.name() {
                    for (_, g) in &mut contributions {
                        g.iter_mut().for_each(|v| *v *= fault.factor);
                    }
                }
            }
            for (var, g) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (matches!(node.op, Op::Leaf) && node.needs_grad).then(|| {
                    let shape = node.value.shape().to_vec();
                    match g {
                        Some(g) => Tensor::from_raw(shape, g),
                        None => Tensor::zeros(shape),
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn local_partials(&self, id: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let ga = gout.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb = gout.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, gout.iter().map(|g| g * f).collect())],
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                let mut gb = vec![0.0; c];
                for row in gout.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                vec![(*x, gout.to_vec()), (*b, gb)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = dot(grow, brow);
                        let aip = ad[i * k + p];
                        if aip != 0.0 {
                            for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * g;
                            }
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let c = val(p).cols();
                        let mut g = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            g.extend_from_slice(&gout[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        (p, g)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let g = gout[offset..offset + n].to_vec();
                        offset += n;
                        (p, g)
                    })
                    .collect()
            }
            Op::GatherRows { src, index } => {
                let t = val(*src);
                let c = t.cols();
                let mut g = vec![0.0; t.len()];
                for (r, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        for (o, v) in g[i * c..(i + 1) * c].iter_mut().zip(&gout[r * c..(r + 1) * c]) {
                            *o += v;
                        }
                    }
                }
                vec![(*src, g)]
            }
            Op::Sigmoid(x) => {
                let g = gout
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                vec![(*x, g)]
            }
            Op::Relu(x) => {
                let g = gout
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, g)]
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut g = Vec::with_capacity(gout.len());
                for (y, dy) in node.value.data().chunks(c).zip(gout.chunks(c)) {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    g.extend(y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)));
                }
                vec![(*x, g)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = node.value.cols();
                let gam = val(*gamma).data();
                let mut gx = Vec::with_capacity(gout.len());
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ((dy, xh), is) in gout.chunks(c).zip(normalized.chunks(c)).zip(inv_std) {
                    let dxh: Vec<f64> = dy.iter().zip(gam).map(|(d, g)| d * g).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let n = c as f64;
                    gx.extend(dxh.iter().zip(xh).map(|(d, h)| is / n * (n * d - s1 - h * s2)));
                    for j in 0..c {
                        gg[j] += dy[j] * xh[j];
                        gb[j] += dy[j];
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, gout.iter().zip(mask).map(|(g, m)| g * m).collect())]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let d = tq.cols();
                let (nq, nk) = (tq.rows(), tk.rows());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * d];
                let mut dp = vec![0.0; nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let go = &gout[i * d + off..i * d + off + dh];
                        for j in 0..nk {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = dot(go, vj);
                            if prow[j] != 0.0 {
                                for (o, g) in gv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                    *o += prow[j] * g;
                                }
                            }
                        }
                        let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..nk {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for t in 0..dh {
                                gq[i * d + off + t] += ds * kd[j * d + off + t];
                                gk[j * d + off + t] += ds * qd[i * d + off + t];
                            }
                        }
                    }
                }
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; val(*x).len()])],
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let g = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| gout[0] * focal_term(z, y, *alpha, *gamma).1)
                    .collect();
                vec![(*logits, g)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let c = val(*logits).cols();
                let mut g: Vec<f64> = probs.iter().map(|p| p * gout[0]).collect();
                for (r, &y) in targets.iter().enumerate() {
                    g[r * c + y] -= gout[0];
                }
                vec![(*logits, g)]
            }
            Op::BinaryCrossEntropy { logits, targets } => {
                let g = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let p = sigmoid(z);
                        // each log term only contributes while unclamped
                        let pos = if p > LOG_CLAMP { -y * (1.0 - p) } else { 0.0 };
                        let neg = if 1.0 - p > LOG_CLAMP { (1.0 - y) * p } else { 0.0 };
                        gout[0] * (pos + neg)
                    })
                    .collect();
                vec![(*logits, g)]
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Focal term value and its derivative with respect to the logit.
fn focal_term(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    // sign: +1 for a positive target, -1 for a negative one
    let s = if y > 0.5 { 1.0 } else { -1.0 };
    let alpha_t = if y > 0.5 { alpha } else { 1.0 - alpha };
    let p_t = sigmoid(s * z);
    let q_t = sigmoid(-s * z);
    let raw_log = log_sigmoid(s * z);
    let clamped = raw_log < LOG_CLAMP.ln();
    let log_pt = raw_log.max(LOG_CLAMP.ln());
    let weight = if gamma == 0.0 { 1.0 } else { q_t.powf(gamma) };
    let value = -alpha_t * weight * log_pt;
    // d p_t / dz = s p_t q_t, and d/dp_t of the term simplifies so no
    // negative powers of q_t appear.
    let modulating = if gamma == 0.0 { 0.0 } else { gamma * p_t * weight * log_pt };
    let log_part = if clamped { 0.0 } else { q_t * weight };
    let grad = s * (-alpha_t) * (-modulating + log_part);
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_along_last_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(c).shape(), &[1, 3]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).requiring_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square_sum_is_twice_input() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.0];
        let x = tape.leaf(t(&[3], &data).requiring_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).requiring_grad());
        let y = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).requiring_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).requiring_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).requiring_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
        let c = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 6], &[0.0; 12]));
        assert!(matches!(tape.attention(a, a, a, 4, None), Err(Error::HeadCount { .. })));
    }

    #[test]
    fn dropout_identity_cases() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let z = tape.dropout::<rand_chacha::ChaCha8Rng>(x, 0.7, None).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
        assert!(tape.dropout(x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![1000]));
        let y = tape.dropout(x, 0.25, Some(&mut rng)).unwrap();
        for v in tape.value(y).data() {
            assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_gradient_matches_difference_quotient() {
        for &(z, y, g) in &[(0.3, 1.0, 2.0), (-1.2, 0.0, 2.0), (2.0, 0.0, 0.5), (0.7, 1.0, 0.0)] {
            let h = 1e-6;
            let num = (focal_term(z + h, y, 0.25, g).0 - focal_term(z - h, y, 0.25, g).0) / (2.0 * h);
            let ana = focal_term(z, y, 0.25, g).1;
            assert!((num - ana).abs() < 1e-7, "z={z} y={y} g={g}: {num} vs {ana}");
        }
    }
}
