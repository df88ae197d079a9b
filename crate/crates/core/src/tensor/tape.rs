//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`]; node ids are handed out
//! in creation order, so the tape is topologically sorted by construction
//! and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use super::dense::{log_sum_exp, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_row};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    Reshape(NodeId),
    GatherRows {
        src: NodeId,
        index: Vec<usize>,
    },
    Stack(Vec<NodeId>),
    Concat(NodeId, NodeId),
    SlicePositions {
        src: NodeId,
        start: usize,
    },
    GatherPositions {
        src: NodeId,
        positions: Vec<usize>,
    },
    AddPositional(NodeId, NodeId),
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<F>,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::AddPositional(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Softmax(a) => vec![*a],
            Op::GatherRows { src, .. }
            | Op::SlicePositions { src, .. }
            | Op::GatherPositions { src, .. } => vec![*src],
            Op::Stack(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Ordered record of tensor operations.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, l, d] => Ok((n, l, d)),
        _ => shape_err(op, format!("expected rank-3 tensor, got {:?}", t.shape())),
    }
}

fn dims2<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => shape_err(op, format!("expected rank-2 tensor, got {:?}", t.shape())),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: vec![],
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: vec![],
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf holding a parameter value.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Param)
    }

    /// `a[n,k] · b[k,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = dims2(self.value(a), "matmul")?;
        let (k2, m) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2}"));
        }
        let mut out = vec![F::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b)))
    }

    /// `a[n,k] · b[m,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = dims2(self.value(a), "matmul_nt")?;
        let (m, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", format!("widths {k} vs {k2}"));
        }
        let mut out = vec![F::zero(); n * m];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Selects leading-axis rows; rows may repeat.
    pub fn gather_rows(&mut self, src: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let v = self.value(src);
        let rows = v.rows();
        let w = v.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &r in &index {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: r,
                    size: rows,
                });
            }
            data.extend_from_slice(v.row(r));
        }
        let mut shape = v.shape().to_vec();
        if shape.is_empty() {
            shape.push(index.len());
        } else {
            shape[0] = index.len();
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::GatherRows { src, index }))
    }

    /// Stacks `L` tensors of shape `[n, d]` into `[n, L, d]`.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return shape_err("stack", "empty sequence");
        };
        let (n, d) = dims2(self.value(first), "stack")?;
        let l = xs.len();
        let mut data = vec![F::zero(); n * l * d];
        for (p, &x) in xs.iter().enumerate() {
            let v = self.value(x);
            if v.shape() != [n, d] {
                return shape_err("stack", format!("position {p} has shape {:?}", v.shape()));
            }
            for b in 0..n {
                data[(b * l + p) * d..(b * l + p + 1) * d].copy_from_slice(v.row(b));
            }
        }
        let t = Tensor::new(vec![n, l, d], data)?;
        Ok(self.push(t, Op::Stack(xs.to_vec())))
    }

    /// Concatenates `[n, la, d]` and `[n, lb, d]` along the position axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, la, d) = dims3(self.value(a), "concat")?;
        let (n2, lb, d2) = dims3(self.value(b), "concat")?;
        if n != n2 || d != d2 {
            return shape_err("concat", format!("[{n},_,{d}] vs [{n2},_,{d2}]"));
        }
        let l = la + lb;
        let mut data = Vec::with_capacity(n * l * d);
        for r in 0..n {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let t = Tensor::new(vec![n, l, d], data)?;
        Ok(self.push(t, Op::Concat(a, b)))
    }

    /// Positions `start..end` of a `[n, L, d]` tensor.
    pub fn slice_positions(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, l, d) = dims3(self.value(src), "slice_positions")?;
        if start > end || end > l {
            return shape_err("slice_positions", format!("{start}..{end} of {l}"));
        }
        let len = end - start;
        let mut data = Vec::with_capacity(n * len * d);
        let v = self.value(src).data();
        for b in 0..n {
            data.extend_from_slice(&v[(b * l + start) * d..(b * l + end) * d]);
        }
        let t = Tensor::new(vec![n, len, d], data)?;
        Ok(self.push(t, Op::SlicePositions { src, start }))
    }

    /// Picks position `positions[b]` of each row of a `[n, L, d]` tensor.
    pub fn gather_positions(&mut self, src: NodeId, positions: Vec<usize>) -> Result<NodeId> {
        let (n, l, d) = dims3(self.value(src), "gather_positions")?;
        if positions.len() != n {
            return shape_err("gather_positions", format!("{} positions for {n} rows", positions.len()));
        }
        let v = self.value(src).data();
        let mut data = Vec::with_capacity(n * d);
        for (b, &p) in positions.iter().enumerate() {
            if p >= l {
                return Err(Error::IndexOutOfRange {
                    what: "gather_positions",
                    index: p,
                    size: l,
                });
            }
            data.extend_from_slice(&v[(b * l + p) * d..(b * l + p + 1) * d]);
        }
        let t = Tensor::new(vec![n, d], data)?;
        Ok(self.push(t, Op::GatherPositions { src, positions }))
    }

    pub fn select_position(&mut self, src: NodeId, position: usize) -> Result<NodeId> {
        let n = self.value(src).rows();
        self.gather_positions(src, vec![position; n])
    }

    /// Adds row `i` of `table[P, d]` to position `i` of `x[n, L, d]` (`L ≤ P`).
    pub fn add_positional(&mut self, x: NodeId, table: NodeId) -> Result<NodeId> {
        let (n, l, d) = dims3(self.value(x), "add_positional")?;
        let (p, d2) = dims2(self.value(table), "add_positional")?;
        if d != d2 || l > p {
            return shape_err("add_positional", format!("[{n},{l},{d}] + [{p},{d2}]"));
        }
        let tv = self.value(table).data();
        let mut data = self.value(x).data().to_vec();
        for b in 0..n {
            for i in 0..l {
                let o = &mut data[(b * l + i) * d..(b * l + i + 1) * d];
                for (a, &t) in o.iter_mut().zip(&tv[i * d..(i + 1) * d]) {
                    *a += t;
                }
            }
        }
        let t = Tensor::new(vec![n, l, d], data)?;
        Ok(self.push(t, Op::AddPositional(x, table)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let w = *v.shape().last().unwrap_or(&1);
        let mut out = vec![F::zero(); v.len()];
        if w > 0 {
            for (src, dst) in v.data().chunks(w).zip(out.chunks_mut(w)) {
                softmax_row(src, dst);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` over rows of `logits[n, c]`.
    ///
    /// Rows with zero weight contribute exactly zero and receive exactly
    /// zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<F>,
    ) -> Result<NodeId> {
        let (n, c) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return shape_err(
                "cross_entropy",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            );
        }
        let v = self.value(logits);
        let mut total = F::zero();
        let mut probs = if self.grad_enabled {
            vec![F::zero(); n * c]
        } else {
            vec![]
        };
        for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w == F::zero() {
                continue;
            }
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "categorical target",
                    index: t,
                    size: c,
                });
            }
            let row = v.row(i);
            total += w * (log_sum_exp(row) - row[t]);
            if self.grad_enabled {
                softmax_row(row, &mut probs[i * c..(i + 1) * c]);
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Multi-head scaled dot-product attention with a strict causal mask.
    ///
    /// `q`, `k`, `v` are `[n, L, d]`; heads split the width into contiguous
    /// blocks of `d / heads`. Position `i` attends to positions `j ≤ i`;
    /// positions whose `key_valid` flag is false get the most negative
    /// finite score before the softmax.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (n, l, d) = dims3(self.value(q), "attention")?;
        for x in [k, v] {
            if self.value(x).shape() != [n, l, d] {
                return shape_err("attention", format!("q/k/v shapes differ at {:?}", self.value(x).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(mask) = key_valid {
            if mask.len() != n * l {
                return shape_err("attention", format!("mask of {} for {n}x{l}", mask.len()));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![F::zero(); n * l * d];
        let mut probs = if self.grad_enabled {
            vec![F::zero(); n * heads * l * l]
        } else {
            vec![]
        };
        let mut scores = vec![F::zero(); l];
        let mut p = vec![F::zero(); l];
        for b in 0..n {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let qi = &qv[(b * l + i) * d + off..(b * l + i) * d + off + dh];
                    for j in 0..=i {
                        let valid = key_valid.is_none_or(|m| m[b * l + j]);
                        scores[j] = if valid {
                            let kj = &kv[(b * l + j) * d + off..(b * l + j) * d + off + dh];
                            let mut s = F::zero();
                            for (&x, &y) in qi.iter().zip(kj) {
                                s += x * y;
                            }
                            s * scale
                        } else {
                            F::min_value()
                        };
                    }
                    softmax_row(&scores[..=i], &mut p[..=i]);
                    let o = &mut out[(b * l + i) * d + off..(b * l + i) * d + off + dh];
                    for j in 0..=i {
                        let pj = p[j];
                        if pj == F::zero() {
                            continue;
                        }
                        let vj = &vv[(b * l + j) * d + off..(b * l + j) * d + off + dh];
                        for (oo, &x) in o.iter_mut().zip(vj) {
                            *oo += pj * x;
                        }
                    }
                    if self.grad_enabled {
                        let base = ((b * heads + h) * l + i) * l;
                        probs[base..base + i + 1].copy_from_slice(&p[..=i]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, l, d], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }))
    }

    /// Gradients of the scalar `seed` with respect to every node.
    pub fn backward(&self, seed: NodeId) -> Result<NodeGrads<F>> {
        if !self.grad_enabled {
            return Err(Error::Config("backward on an inference tape".into()));
        }
        if self.value(seed).len() != 1 {
            return shape_err(
                "backward",
                format!("seed must be scalar, got {:?}", self.value(seed).shape()),
            );
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::full(self.value(seed).shape(), F::one()));
        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            for input in node.op.inputs() {
                assert!(input.0 < id, "tape is not topologically ordered");
            }
            self.propagate(NodeId(id), &node.op, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    fn propagate(&self, id: NodeId, op: &Op<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let m = self.value(*b).shape()[1];
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let ga = acc(grads, *a, self.value(*a).shape());
                matmul_nt_acc(gd, self.value(*b).data(), ga, n, m, k);
                let gb = acc(grads, *b, self.value(*b).shape());
                matmul_tn_acc(self.value(*a).data(), gd, gb, n, k, m);
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let m = self.value(*b).shape()[0];
                // C = A·Bᵀ: dA = G · B ; dB = Gᵀ · A
                let ga = acc(grads, *a, self.value(*a).shape());
                matmul_acc(gd, self.value(*b).data(), ga, n, m, k);
                let gb = acc(grads, *b, self.value(*b).shape());
                matmul_tn_acc(gd, self.value(*a).data(), gb, n, m, k);
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    let gx = acc(grads, *x, g.shape());
                    for (o, &v) in gx.iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.shape());
                for (o, &v) in ga.iter_mut().zip(gd) {
                    *o += v * *s;
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                let ga = acc(grads, *a, self.value(*a).shape());
                for o in ga.iter_mut() {
                    *o += s;
                }
            }
            Op::Reshape(a) => {
                let ga = acc(grads, *a, self.value(*a).shape());
                for (o, &v) in ga.iter_mut().zip(gd) {
                    *o += v;
                }
            }
            Op::GatherRows { src, index } => {
                let w = self.value(*src).row_len();
                let ga = acc(grads, *src, self.value(*src).shape());
                for (i, &r) in index.iter().enumerate() {
                    for (o, &v) in ga[r * w..(r + 1) * w].iter_mut().zip(&gd[i * w..(i + 1) * w]) {
                        *o += v;
                    }
                }
            }
            Op::Stack(xs) => {
                let (n, l, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (p, x) in xs.iter().enumerate() {
                    let gx = acc(grads, *x, &[n, d]);
                    for b in 0..n {
                        let src = &gd[(b * l + p) * d..(b * l + p + 1) * d];
                        for (o, &v) in gx[b * d..(b + 1) * d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (n, l, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let la = self.value(*a).shape()[1];
                let lb = l - la;
                let ga = acc(grads, *a, self.value(*a).shape());
                for r in 0..n {
                    let src = &gd[r * l * d..(r * l + la) * d];
                    for (o, &v) in ga[r * la * d..(r + 1) * la * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                let gb = acc(grads, *b, self.value(*b).shape());
                for r in 0..n {
                    let src = &gd[(r * l + la) * d..(r + 1) * l * d];
                    for (o, &v) in gb[r * lb * d..(r + 1) * lb * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            Op::SlicePositions { src, start } => {
                let (n, len, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let l = self.value(*src).shape()[1];
                let ga = acc(grads, *src, self.value(*src).shape());
                for b in 0..n {
                    let dst = &mut ga[(b * l + start) * d..(b * l + start + len) * d];
                    for (o, &v) in dst.iter_mut().zip(&gd[b * len * d..(b + 1) * len * d]) {
                        *o += v;
                    }
                }
            }
            Op::GatherPositions { src, positions } => {
                let (l, d) = (self.value(*src).shape()[1], self.value(*src).shape()[2]);
                let ga = acc(grads, *src, self.value(*src).shape());
                for (b, &p) in positions.iter().enumerate() {
                    let dst = &mut ga[(b * l + p) * d..(b * l + p + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&gd[b * d..(b + 1) * d]) {
                        *o += v;
                    }
                }
            }
            Op::AddPositional(x, table) => {
                let (n, l, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let gx = acc(grads, *x, g.shape());
                for (o, &v) in gx.iter_mut().zip(gd) {
                    *o += v;
                }
                let gt = acc(grads, *table, self.value(*table).shape());
                for b in 0..n {
                    for i in 0..l {
                        let src = &gd[(b * l + i) * d..(b * l + i + 1) * d];
                        for (o, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let p = self.value(id).data();
                let w = *g.shape().last().unwrap_or(&1);
                let ga = acc(grads, *a, g.shape());
                if w > 0 {
                    for ((prow, grow), orow) in p.chunks(w).zip(gd.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: F = prow.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                        for ((o, &pi), &gi) in orow.iter_mut().zip(prow).zip(grow) {
                            *o += pi * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = gd[0];
                let c = self.value(*logits).shape()[1];
                let gl = acc(grads, *logits, self.value(*logits).shape());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let row = &mut gl[i * c..(i + 1) * c];
                    for (j, o) in row.iter_mut().enumerate() {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        *o += s * w * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[F],
        gd: &[F],
        grads: &mut [Option<Tensor<F>>],
    ) {
        let shape = self.value(q).shape().to_vec();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![F::zero(); n * l * d];
        let mut gk = vec![F::zero(); n * l * d];
        let mut gv = vec![F::zero(); n * l * d];
        let mut dp = vec![F::zero(); l];
        for b in 0..n {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let base = ((b * heads + h) * l + i) * l;
                    let p = &probs[base..base + i + 1];
                    let go = &gd[(b * l + i) * d + off..(b * l + i) * d + off + dh];
                    let mut dot = F::zero();
                    for j in 0..=i {
                        let vj = &vv[(b * l + j) * d + off..(b * l + j) * d + off + dh];
                        let mut s = F::zero();
                        for (&x, &y) in go.iter().zip(vj) {
                            s += x * y;
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    let qi_off = (b * l + i) * d + off;
                    for j in 0..=i {
                        let pj = p[j];
                        if pj == F::zero() {
                            continue;
                        }
                        let kj_off = (b * l + j) * d + off;
                        let ds = pj * (dp[j] - dot) * scale;
                        for c in 0..dh {
                            gq[qi_off + c] += ds * kv[kj_off + c];
                            gk[kj_off + c] += ds * qv[qi_off + c];
                            gv[kj_off + c] += pj * go[c];
                        }
                    }
                }
            }
        }
        for (node, delta) in [(q, gq), (k, gk), (v, gv)] {
            let dst = acc(grads, node, &shape);
            for (o, x) in dst.iter_mut().zip(delta) {
                *o += x;
            }
        }
    }
}

fn acc<'a, F: Scalar>(
    grads: &'a mut [Option<Tensor<F>>],
    id: NodeId,
    shape: &[usize],
) -> &'a mut [F] {
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct NodeGrads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> NodeGrads<F> {
    /// Gradient of the seed with respect to `id`, if it influenced the seed.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Gradients for every tensor of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            tensors: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    /// Zeros with the same shapes as `self`.
    pub fn zeros_matching(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.tensors.iter()
    }

    pub fn norm(&self) -> F {
        self.tensors.iter().map(Tensor::norm_sq).sum::<F>().sqrt()
    }

    /// Concatenation of all gradient entries in store order.
    pub fn flatten(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`Gradients::flatten`], using `self` for shapes.
    pub fn with_flat(&self, flat: &[F]) -> Result<Self> {
        let total: usize = self.tensors.iter().map(Tensor::len).sum();
        if flat.len() != total {
            return shape_err("Gradients::with_flat", format!("{} vs {total}", flat.len()));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            tensors.push(Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec())?);
            off += t.len();
        }
        Ok(Self { tensors })
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// A tape bound to a parameter store.
///
/// Each parameter is materialized at most once per graph, so a codec used
/// at several places (list items, shared sub-structs) accumulates one
/// gradient.
pub struct Graph<'p, F: Scalar> {
    tape: Tape<F>,
    params: &'p ParamStore<F>,
    bound: HashMap<ParamId, NodeId>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Self {
            tape: Tape::inference(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.bound.get(&id) {
            return node;
        }
        let node = self.tape.param(self.params.get(id).clone());
        self.bound.insert(id, node);
        node
    }

    /// Gradients of `seed` for every parameter; untouched ones are zero.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<F>> {
        let node_grads = self.tape.backward(seed)?;
        let mut out = Gradients::zeros_like(self.params);
        for (&pid, &node) in &self.bound {
            if let Some(g) = node_grads.get(node) {
                out.get_mut(pid).add_assign(g);
            }
        }
        for pid in self.params.ids() {
            if !out.get(pid).all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    self.params.path(pid)
                )));
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> Deref for Graph<'_, F> {
    type Target = Tape<F>;
    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<F: Scalar> DerefMut for Graph<'_, F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        &mut self.tape
    }
}
