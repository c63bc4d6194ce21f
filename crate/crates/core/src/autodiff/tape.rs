//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its forward value and enough saved state to
//! apply its local backward rule. `backward` replays the tape in reverse into a
//! scratch buffer and then adds the result into the persistent gradient of
//! each `requires_grad` leaf, so repeated calls accumulate.

use std::ops::Range;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent attention problem inside a packed query/key matrix.
///
/// `mask[i * key.len() + j]` is `true` when query `i` may attend to key `j`;
/// `None` means every key is visible.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Range<usize>,
    pub key: Range<usize>,
    pub mask: Option<Vec<bool>>,
}

impl AttentionBlock {
    pub fn full(query: Range<usize>, key: Range<usize>) -> Self {
        AttentionBlock {
            query,
            key,
            mask: None,
        }
    }

    fn visible(&self, i: usize, j: usize) -> bool {
        match &self.mask {
            Some(m) => m[i * self.key.len() + j],
            None => true,
        }
    }
}

/// Attention weights saved by an attention node, one `q_len × k_len`
/// row-major matrix per (block, head).
pub struct AttentionProbs<'a, T> {
    pub heads: usize,
    pub blocks: &'a [AttentionBlock],
    probs: &'a [Vec<T>],
}

impl<T: Scalar> AttentionProbs<'_, T> {
    pub fn weights(&self, block: usize, head: usize) -> &[T] {
        &self.probs[block * self.heads + head]
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SelectRows {
        x: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_weights: Vec<T>,
        probs: Vec<T>,
    },
    StraightThrough(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttentionBlock>,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of operations; one tape per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    stochastic: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether a non-deterministic op (train-mode dropout) was recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_, T>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                heads,
                blocks,
                probs,
                ..
            } => Some(AttentionProbs {
                heads: *heads,
                blocks,
                probs,
            }),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a · b` where `b` is a matrix and `a` has any rank; leading axes of `a`
    /// are treated as batch rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `x[..×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let n = tb.len();
        let mut data = tx.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += tb.data()[i % n];
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax_axis(x, axis)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Param(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if let Some(bad) = tx.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: format!("non-finite input {bad}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let rows = tx.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = 1.0 - rate;
        let tx = self.value(x);
        let scale = T::lit(1.0 / keep);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Gathers rows of a matrix; with an embedding table this is a hard
    /// embedding lookup.
    pub fn select_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(shape_err("select_rows", tx.shape(), &[ids.len()]));
        }
        let (rows, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "select_rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(tx.row(id));
        }
        let value = Tensor::new([ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    /// Soft embedding lookup: `distribution · table`.
    pub fn soft_lookup(&mut self, distribution: Var, table: Var) -> Result<Var> {
        self.matmul(distribution, table)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != d {
                return Err(shape_err("concat_rows", self.shape(*first), tp.shape()));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new([rows, d], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || rows.end > tx.rows() || rows.start > rows.end {
            return Err(Error::Index {
                what: "slice_rows",
                index: rows.end,
                size: tx.rows(),
            });
        }
        let d = tx.cols();
        let data = tx.data()[rows.start * d..rows.end * d].to_vec();
        let value = Tensor::new([rows.len(), d], data)?;
        Ok(self.push(
            value,
            Op::SliceRows {
                x,
                start: rows.start,
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(shape_err("transpose", tx.shape(), &[]));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::new([c, r], data)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::Param("mean of empty tensor".into()));
        }
        let s = tx.data().iter().copied().sum::<T>() / T::lit(tx.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Mean token cross-entropy of `logits[N×C]` against integer targets.
    ///
    /// With `class_weights`, each row is weighted by the weight of its target
    /// and the sum is normalised by the total weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if tl.shape().len() != 2 || targets.len() != n || n == 0 {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(shape_err("cross_entropy weights", &[c], &[w.len()]));
            }
        }
        let mut probs = vec![T::zero(); n * c];
        let mut row_weights = vec![T::one(); n];
        let mut loss = T::zero();
        for r in 0..n {
            let t = targets[r];
            if t >= c {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: c,
                });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if let Some(w) = class_weights {
                row_weights[r] = w[t];
            }
            loss += row_weights[r] * (lse - row[t]);
        }
        let total_weight: T = row_weights.iter().copied().sum();
        if total_weight <= T::zero() {
            return Err(Error::Param("cross_entropy weights sum to zero".into()));
        }
        for w in &mut row_weights {
            *w /= total_weight;
        }
        loss /= total_weight;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: "cross_entropy",
                detail: format!("loss {loss}"),
            });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_weights,
                probs,
            },
            &[logits],
        ))
    }

    /// Forward value is the exact one-hot of `hard` per row; the backward
    /// pass hands the incoming gradient to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: &[usize]) -> Result<Var> {
        let ts = self.value(soft);
        if ts.shape().len() != 2 {
            return Err(shape_err("straight_through", ts.shape(), &[hard.len()]));
        }
        let value = Tensor::one_hot(ts.rows(), ts.cols(), hard)?;
        Ok(self.push(value, Op::StraightThrough(soft), &[soft]))
    }

    /// Scaled dot-product attention for `heads` heads over packed rows.
    ///
    /// `q` is `[Nq × d]`, `k` and `v` are `[Nk × d]`; every block's query
    /// range must be covered exactly once. The output is the concatenation
    /// of per-head results, `[Nq × d]`, before any output projection.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttentionBlock>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tq.shape().len() != 2 || tk.shape() != tv.shape() || tk.cols() != d {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Param(format!("{heads} heads do not divide width {d}")));
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        let mut covered = vec![false; nq];
        for b in &blocks {
            if b.query.end > nq || b.key.end > nk || b.key.is_empty() {
                return Err(Error::Index {
                    what: "attention block",
                    index: b.query.end.max(b.key.end),
                    size: nq.min(nk),
                });
            }
            if let Some(m) = &b.mask {
                if m.len() != b.query.len() * b.key.len() {
                    return Err(shape_err(
                        "attention mask",
                        &[b.query.len(), b.key.len()],
                        &[m.len()],
                    ));
                }
            }
            for i in b.query.clone() {
                if covered[i] {
                    return Err(Error::Param(format!("query row {i} in two attention blocks")));
                }
                covered[i] = true;
                if !(0..b.key.len()).any(|j| b.visible(i - b.query.start, j)) {
                    return Err(Error::Mask { row: i });
                }
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::Param(format!("query row {i} not in any attention block")));
        }

        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![T::zero(); nq * d];
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for b in &blocks {
            let (ql, kl) = (b.query.len(), b.key.len());
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![T::zero(); ql * kl];
                for i in 0..ql {
                    let qrow = &qd[(b.query.start + i) * d + off..][..dh];
                    let prow = &mut p[i * kl..(i + 1) * kl];
                    let mut max = T::neg_infinity();
                    for (j, pj) in prow.iter_mut().enumerate() {
                        if b.visible(i, j) {
                            let krow = &kd[(b.key.start + j) * d + off..][..dh];
                            let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                            *pj = s;
                            max = max.max(s);
                        }
                    }
                    let mut total = T::zero();
                    for (j, pj) in prow.iter_mut().enumerate() {
                        if b.visible(i, j) {
                            *pj = (*pj - max).exp();
                            total += *pj;
                        } else {
                            *pj = T::zero();
                        }
                    }
                    for pj in prow.iter_mut() {
                        *pj /= total;
                    }
                    let orow = &mut out[(b.query.start + i) * d + off..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        if pj != T::zero() {
                            let vrow = &vd[(b.key.start + j) * d + off..][..dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += pj * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        let value = Tensor::new([nq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                let target: Var = $v;
                if nodes[target.0].needs_grad {
                    let len = nodes[target.0].value.len();
                    let $buf: &mut Vec<T> =
                        grads[target.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k.max(1);
                with_grad!(*a, |ga| {
                    T::gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), ga, true);
                });
                with_grad!(*b, |gb| {
                    T::gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), gb, true);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * w;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * w;
                    }
                });
            }
            Op::AddBias(x, b) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y);
                });
                with_grad!(*b, |gb| {
                    let n = gb.len();
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % n] += y;
                    }
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y * *c);
                });
            }
            Op::Relu(x) => {
                let tx = val(*x);
                with_grad!(*x, |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if v > T::zero() {
                            *a += y;
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = nodes[i].value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + c;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
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
                let rows = rstd.len();
                with_grad!(*x, |gx| {
                    let inv_d = T::one() / T::lit(d as f64);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            gx[r * d + c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                with_grad!(*gain, |gg| {
                    for (j, (&y, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                        gg[j % d] += y * h;
                    }
                });
                with_grad!(*bias, |gb| {
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % d] += y;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |gx| {
                    for ((a, &y), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += y * m;
                    }
                });
            }
            Op::SelectRows { x, ids } => {
                let d = val(*x).cols();
                with_grad!(*x, |gx| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gx[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    with_grad!(p, |gp| {
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, &y)| *a += y);
                    });
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = val(*x).cols();
                with_grad!(*x, |gx| {
                    gx[start * d..start * d + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &y)| *a += y);
                });
            }
            Op::Transpose(x) => {
                let tx = val(*x);
                let (r, c) = (tx.rows(), tx.cols());
                with_grad!(*x, |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y);
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                });
            }
            Op::Mean(x) => {
                let n = T::lit(val(*x).len() as f64);
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            } => {
                let c = val(*logits).cols();
                with_grad!(*logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = g[0] * row_weights[r];
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += w * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::StraightThrough(soft) => {
                with_grad!(*soft, |gs| {
                    gs.iter_mut().zip(g).for_each(|(a, &y)| *a += y);
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let d = val(*q).cols();
                let heads = *heads;
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                for (bi, b) in blocks.iter().enumerate() {
                    let (ql, kl) = (b.query.len(), b.key.len());
                    for h in 0..heads {
                        let off = h * dh;
                        let p = &probs[bi * heads + h];
                        let mut ds = vec![T::zero(); kl];
                        for i in 0..ql {
                            let qi = b.query.start + i;
                            let go = &g[qi * d + off..][..dh];
                            let prow = &p[i * kl..(i + 1) * kl];
                            let mut dot = T::zero();
                            for j in 0..kl {
                                if prow[j] == T::zero() {
                                    ds[j] = T::zero();
                                    continue;
                                }
                                let kj = b.key.start + j;
                                let vrow = &vd[kj * d + off..][..dh];
                                let dp: T = go.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                                ds[j] = dp;
                                dot += dp * prow[j];
                                let dvrow = &mut dv[kj * d + off..][..dh];
                                for (a, &y) in dvrow.iter_mut().zip(go) {
                                    *a += prow[j] * y;
                                }
                            }
                            for j in 0..kl {
                                if prow[j] == T::zero() {
                                    continue;
                                }
                                let s = prow[j] * (ds[j] - dot) * scale;
                                let kj = b.key.start + j;
                                for c in 0..dh {
                                    dq[qi * d + off + c] += s * kd[kj * d + off + c];
                                    dk[kj * d + off + c] += s * qd[qi * d + off + c];
                                }
                            }
                        }
                    }
                }
                for (var, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    with_grad!(var, |gv| {
                        gv.iter_mut().zip(&src).for_each(|(a, &y)| *a += y);
                    });
                }
            }
        }
    }
}
