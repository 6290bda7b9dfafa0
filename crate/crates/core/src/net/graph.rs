//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records operations in creation order, so the tape is already
//! topologically sorted and `backward` walks it once in reverse. Parameters are
//! read in place from a [`ParamStore`]; their gradients come back in a
//! [`Grads`] keyed by parameter index.

use std::ops::Range;

use super::params::ParamStore;
use super::tensor::{matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Param(usize),
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, rstd: Vec<T> },
    Attention { qkv: NodeId, heads: usize, blocks: Vec<Range<usize>>, probs: Vec<Vec<T>> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    Reshape(NodeId),
    SegmentMean { x: NodeId, segments: Vec<Range<usize>> },
    WeightedSqErr { pred: NodeId, target: NodeId, weights: Vec<T> },
    RowMse { pred: NodeId, target: NodeId },
    WeightedAbsErr { pred: NodeId, target: NodeId, weights: Vec<T> },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor<T> },
    WeightedSum(Vec<(NodeId, usize, T)>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Gradients for the parameters of a store, `None` where no gradient flowed.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, pid: usize) -> Option<&Tensor<T>> {
        self.params.get(pid).and_then(Option::as_ref)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::is_finite)
    }

    /// `self += scale * other`, slot by slot.
    pub fn accumulate(&mut self, other: &Grads<T>, scale: T) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            let Some(t) = theirs else { continue };
            let slot = mine.get_or_insert_with(|| Tensor::zeros(t.rows, t.cols));
            for (a, &b) in slot.data.iter_mut().zip(&t.data) {
                *a += scale * b;
            }
        }
    }
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, trainable: None, nodes: Vec::new(), param_nodes: vec![None; store.len()] }
    }

    /// Only parameters flagged in `mask` receive gradients; the rest act as
    /// constants and backward skips any subgraph that depends only on them.
    pub fn with_trainable(store: &'p ParamStore<T>, mask: &'p [bool]) -> Self {
        Self { trainable: Some(mask), ..Self::new(store) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match (&self.nodes[id].op, &self.nodes[id].value) {
            (Op::Param(pid), _) => self.store.tensor(*pid),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        self.nodes.len() - 1
    }

    /// Node for parameter `pid`; repeated calls share one node.
    pub fn param(&mut self, pid: usize) -> NodeId {
        if let Some(id) = self.param_nodes[pid] {
            return id;
        }
        let needs_grad = self.trainable.is_none_or(|m| m[pid]);
        self.nodes.push(Node { op: Op::Param(pid), value: None, needs_grad });
        let id = self.nodes.len() - 1;
        self.param_nodes[pid] = Some(id);
        id
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value: Some(t), needs_grad: false });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return shape_err(format!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows != 1 || vb.cols != va.cols {
            return shape_err(format!("bias {:?} for {:?}", vb.shape(), va.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddBias(a, bias), out, &[a, bias]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let (w, b) = (self.param(w), self.param(b));
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu);
        self.push(Op::Gelu(x), out, &[x])
    }

    /// Row-wise layer normalization with affine `1 x d` gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: usize, beta: usize) -> Result<NodeId> {
        let (gamma, beta) = (self.param(gamma), self.param(beta));
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols;
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return shape_err(format!("layer norm gain {:?} for width {d}", vg.shape()));
        }
        let n = T::lit(d as f64);
        let mut xhat = Tensor::zeros(vx.rows, d);
        let mut out = Tensor::zeros(vx.rows, d);
        let mut rstd = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = (var + T::lit(LN_EPS)).sqrt().recip();
            rstd.push(s);
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * vg.data[c] + vb.data[c];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, out, &[x, gamma, beta]))
    }

    /// Multi-head softmax attention from a fused `n x 3D` query/key/value
    /// matrix. Rows attend only within their block; blocks must tile `0..n`.
    pub fn attention(&mut self, qkv: NodeId, heads: usize, blocks: Vec<Range<usize>>) -> Result<NodeId> {
        let v = self.value(qkv);
        if v.cols % 3 != 0 || (v.cols / 3) % heads != 0 {
            return shape_err(format!("attention input width {} with {heads} heads", v.cols));
        }
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.is_empty() {
                return shape_err(format!("attention block {b:?} does not tile rows"));
            }
            next = b.end;
        }
        if next != v.rows {
            return shape_err(format!("attention blocks cover {next} of {} rows", v.rows));
        }
        let d = v.cols / 3;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(v.rows, d);
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for b in &blocks {
            let l = b.len();
            for h in 0..heads {
                let mut p = vec![T::zero(); l * l];
                for i in 0..l {
                    let q = &v.row(b.start + i)[h * dh..(h + 1) * dh];
                    let pi = &mut p[i * l..(i + 1) * l];
                    let mut max = T::neg_infinity();
                    for (j, pij) in pi.iter_mut().enumerate() {
                        let k = &v.row(b.start + j)[d + h * dh..d + (h + 1) * dh];
                        let mut s = T::zero();
                        for (&a, &c) in q.iter().zip(k) {
                            s += a * c;
                        }
                        *pij = s * scale;
                        max = max.max(*pij);
                    }
                    let mut z = T::zero();
                    for pij in pi.iter_mut() {
                        *pij = (*pij - max).exp();
                        z += *pij;
                    }
                    for pij in pi.iter_mut() {
                        *pij /= z;
                    }
                    let o = &mut out.data[(b.start + i) * d + h * dh..(b.start + i) * d + (h + 1) * dh];
                    for (j, &pij) in pi.iter().enumerate() {
                        let val = &v.row(b.start + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        for (ov, &vv) in o.iter_mut().zip(val) {
                            *ov += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(Op::Attention { qkv, heads, blocks, probs }, out, &[qkv]))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows) {
            return shape_err(format!("row {bad} out of {}", v.rows));
        }
        let mut out = Tensor::zeros(idx.len(), v.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(v.row(i));
        }
        Ok(self.push(Op::GatherRows { x, idx }, out, &[x]))
    }

    pub fn concat_rows(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        let cols = self.value(xs[0]).cols;
        let mut data = Vec::new();
        for &x in &xs {
            let v = self.value(x);
            if v.cols != cols {
                return shape_err(format!("concat rows of widths {cols} and {}", v.cols));
            }
            data.extend_from_slice(&v.data);
        }
        let out = Tensor { rows: data.len() / cols, cols, data };
        let inputs = xs.clone();
        Ok(self.push(Op::ConcatRows(xs), out, &inputs))
    }

    pub fn concat_cols(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        if xs.iter().any(|&x| self.value(x).rows != rows) {
            return shape_err("concat columns of differing heights".into());
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &x in &xs {
            let v = self.value(x);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let inputs = xs.clone();
        Ok(self.push(Op::ConcatCols(xs), out, &inputs))
    }

    pub fn slice_cols(&mut self, x: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if cols.end > v.cols || cols.is_empty() {
            return shape_err(format!("column slice {cols:?} of width {}", v.cols));
        }
        let mut out = Tensor::zeros(v.rows, cols.len());
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[cols.clone()]);
        }
        Ok(self.push(Op::SliceCols { x, start: cols.start }, out, &[x]))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return shape_err(format!("reshape {:?} to {rows}x{cols}", v.shape()));
        }
        let out = Tensor { rows, cols, data: v.data.clone() };
        Ok(self.push(Op::Reshape(x), out, &[x]))
    }

    /// One output row per segment: the mean of that segment's rows.
    pub fn segment_mean(&mut self, x: NodeId, segments: Vec<Range<usize>>) -> Result<NodeId> {
        let v = self.value(x);
        let mut out = Tensor::zeros(segments.len(), v.cols);
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > v.rows {
                return shape_err(format!("segment {seg:?} of {} rows", v.rows));
            }
            let inv = T::lit(1.0 / seg.len() as f64);
            for r in seg.clone() {
                for (o, &a) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                    *o += a * inv;
                }
            }
        }
        Ok(self.push(Op::SegmentMean { x, segments }, out, &[x]))
    }

    fn check_pair(&self, pred: NodeId, target: NodeId, weights: Option<usize>) -> Result<()> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return shape_err(format!("prediction {:?} vs target {:?}", p.shape(), t.shape()));
        }
        if weights.is_some_and(|w| w != p.rows) {
            return shape_err(format!("{} row weights for {} rows", weights.unwrap_or(0), p.rows));
        }
        Ok(())
    }

    /// Scalar `sum_r w_r sum_c (pred - target)^2`.
    pub fn weighted_sq_err(&mut self, pred: NodeId, target: NodeId, weights: Vec<T>) -> Result<NodeId> {
        self.check_pair(pred, target, Some(weights.len()))?;
        let (p, t) = (self.value(pred), self.value(target));
        let mut s = T::zero();
        for (r, &w) in weights.iter().enumerate() {
            let e: T = p.row(r).iter().zip(t.row(r)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            s += w * e;
        }
        Ok(self.push(Op::WeightedSqErr { pred, target, weights }, Tensor::scalar(s), &[pred, target]))
    }

    /// Column `r x 1` of per-row mean squared errors.
    pub fn row_mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.check_pair(pred, target, None)?;
        let (p, t) = (self.value(pred), self.value(target));
        let inv = T::lit(1.0 / p.cols as f64);
        let data = (0..p.rows)
            .map(|r| p.row(r).iter().zip(t.row(r)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() * inv)
            .collect();
        let out = Tensor { rows: p.rows, cols: 1, data };
        Ok(self.push(Op::RowMse { pred, target }, out, &[pred, target]))
    }

    /// Scalar `sum_r w_r sum_c |pred - target|`.
    pub fn weighted_abs_err(&mut self, pred: NodeId, target: NodeId, weights: Vec<T>) -> Result<NodeId> {
        self.check_pair(pred, target, Some(weights.len()))?;
        let (p, t) = (self.value(pred), self.value(target));
        let mut s = T::zero();
        for (r, &w) in weights.iter().enumerate() {
            let e: T = p.row(r).iter().zip(t.row(r)).map(|(&a, &b)| (a - b).abs()).sum();
            s += w * e;
        }
        Ok(self.push(Op::WeightedAbsErr { pred, target, weights }, Tensor::scalar(s), &[pred, target]))
    }

    /// Mean softmax cross-entropy over rows.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let v = self.value(logits);
        if labels.len() != v.rows {
            return shape_err(format!("{} labels for {} rows", labels.len(), v.rows));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v.cols) {
            return Err(Error::Contract(format!("label {bad} outside {} classes", v.cols)));
        }
        let mut probs = Tensor::zeros(v.rows, v.cols);
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - max).exp() / z;
            }
            loss += z.ln() + max - row[y];
        }
        loss /= T::lit(v.rows as f64);
        Ok(self.push(Op::SoftmaxCe { logits, labels, probs }, Tensor::scalar(loss), &[logits]))
    }

    /// Scalar `sum coeff * value(node)[flat_index]`.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, usize, T)>) -> NodeId {
        let s = terms.iter().map(|&(n, i, c)| c * self.value(n).data[i]).sum();
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(Op::WeightedSum(terms), Tensor::scalar(s), &inputs)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        self.weighted_sum(xs.iter().map(|&x| (x, 0, T::one())).collect())
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", lv.shape()));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));
        let mut out = Grads { params: vec![None; self.store.len()] };
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop(id, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: NodeId) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let (r, c) = self.value(id).shape();
        Some(grads[id].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backprop(&self, id: NodeId, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Grads<T>) {
        match &self.nodes[id].op {
            Op::Param(pid) => out.params[*pid] = Some(g),
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    matmul_bt_acc(&g.data, &vb.data, &mut ga.data, va.rows, vb.cols, va.cols);
                }
                if let Some(gb) = self.slot(grads, b) {
                    matmul_at_acc(&va.data, &g.data, &mut gb.data, va.rows, va.cols, vb.cols);
                }
            }
            &Op::AddBias(a, bias) => {
                if let Some(gb) = self.slot(grads, bias) {
                    for r in 0..g.rows {
                        for (x, &y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(&g);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(&g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.add_assign(&g);
                }
            }
            &Op::Gelu(x) => {
                let vx = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, &a), &dy) in gx.data.iter_mut().zip(&vx.data).zip(&g.data) {
                        *o += dy * gelu_grad(a);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = xhat.cols;
                let vg = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (dy, h) in g.data.chunks(d).zip(xhat.data.chunks(d)) {
                        for c in 0..d {
                            gg.data[c] += dy[c] * h[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for dy in g.data.chunks(d) {
                        for c in 0..d {
                            gb.data[c] += dy[c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::lit(d as f64);
                    for r in 0..xhat.rows {
                        let dy = g.row(r);
                        let h = xhat.row(r);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dh = dy[c] * vg.data[c];
                            m1 += dh;
                            m2 += dh * h[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..d {
                            let dh = dy[c] * vg.data[c];
                            gx.data[r * d + c] += rstd[r] * (dh - m1 - h[c] * m2);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, blocks, probs } => {
                let v = self.value(*qkv);
                let Some(gq) = self.slot(grads, *qkv) else { return };
                attention_backward(v, &g, gq, *heads, blocks, probs);
            }
            Op::GatherRows { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &y) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += y;
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(gx) = self.slot(grads, x) {
                        for (o, &y) in gx.data.iter_mut().zip(&g.data[off..off + n]) {
                            *o += y;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).cols;
                    if let Some(gx) = self.slot(grads, x) {
                        for r in 0..g.rows {
                            for (o, &y) in gx.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += y;
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(gx) = self.slot(grads, x) {
                    for r in 0..g.rows {
                        for (o, &y) in gx.row_mut(r)[start..start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += y;
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for (o, &y) in gx.data.iter_mut().zip(&g.data) {
                        *o += y;
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = T::lit(1.0 / seg.len() as f64);
                        for r in seg.clone() {
                            for (o, &y) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += y * inv;
                            }
                        }
                    }
                }
            }
            Op::WeightedSqErr { pred, target, weights } => {
                self.pair_backward(*pred, *target, grads, |r, d| T::lit(2.0) * weights[r] * d * g.item());
            }
            Op::RowMse { pred, target } => {
                let inv = T::lit(2.0 / self.value(*pred).cols as f64);
                self.pair_backward(*pred, *target, grads, |r, d| inv * d * g.data[r]);
            }
            Op::WeightedAbsErr { pred, target, weights } => {
                self.pair_backward(*pred, *target, grads, |r, d| weights[r] * sign(d) * g.item());
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let scale = g.item() / T::lit(labels.len() as f64);
                    for (r, &y) in labels.iter().enumerate() {
                        for (c, (o, &p)) in gl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let t = if c == y { T::one() } else { T::zero() };
                            *o += (p - t) * scale;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(n, i, c) in terms {
                    if let Some(gn) = self.slot(grads, n) {
                        gn.data[i] += c * g.item();
                    }
                }
            }
        }
    }

    /// Backward for losses of the form `f(row, pred - target)`.
    fn pair_backward(&self, pred: NodeId, target: NodeId, grads: &mut [Option<Tensor<T>>], f: impl Fn(usize, T) -> T) {
        let (p, t) = (self.value(pred), self.value(target));
        let cols = p.cols;
        let delta: Vec<T> = p
            .data
            .iter()
            .zip(&t.data)
            .enumerate()
            .map(|(k, (&a, &b))| f(k / cols, a - b))
            .collect();
        if let Some(gp) = self.slot(grads, pred) {
            for (o, &d) in gp.data.iter_mut().zip(&delta) {
                *o += d;
            }
        }
        if let Some(gt) = self.slot(grads, target) {
            for (o, &d) in gt.data.iter_mut().zip(&delta) {
                *o -= d;
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    v: &Tensor<T>,
    g: &Tensor<T>,
    gq: &mut Tensor<T>,
    heads: usize,
    blocks: &[Range<usize>],
    probs: &[Vec<T>],
) {
    let d = v.cols / 3;
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let w = v.cols;
    let mut k = 0;
    for b in blocks {
        let l = b.len();
        for h in 0..heads {
            let p = &probs[k];
            k += 1;
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut ds = vec![T::zero(); l];
            for i in 0..l {
                let gi = &g.row(b.start + i)[h * dh..(h + 1) * dh];
                let pi = &p[i * l..(i + 1) * l];
                // dP_ij = dO_i . v_j, then dS = P (dP - sum_j P dP).
                let mut dot = T::zero();
                for j in 0..l {
                    let vj = &v.data[(b.start + j) * w + vo..(b.start + j) * w + vo + dh];
                    let mut s = T::zero();
                    for (&a, &c) in gi.iter().zip(vj) {
                        s += a * c;
                    }
                    ds[j] = s;
                    dot += pi[j] * s;
                }
                for j in 0..l {
                    ds[j] = pi[j] * (ds[j] - dot) * scale;
                }
                for j in 0..l {
                    let row_j = (b.start + j) * w;
                    let row_i = (b.start + i) * w;
                    // dV_j += P_ij dO_i
                    let pij = pi[j];
                    for c in 0..dh {
                        gq.data[row_j + vo + c] += pij * gi[c];
                    }
                    let s = ds[j];
                    if s == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        gq.data[row_i + qo + c] += s * v.data[row_j + ko + c];
                        gq.data[row_j + ko + c] += s * v.data[row_i + qo + c];
                    }
                }
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
