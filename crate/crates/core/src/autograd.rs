//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Parameters are
//! read from a borrowed [`ParamStore`] so building a graph never copies
//! weights. One graph is built per example; graphs are cheap and independent,
//! which lets callers evaluate a batch in parallel.

#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{matmul, Mat};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    AddCol { a: Var, col: Var },
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    ReplaceRows { a: Var, row: Var, mask: Vec<bool> },
    WeightedRowSum { a: Var, weights: Vec<f64> },
    NormalizeRows { a: Var, norms: Vec<f64> },
    Im2Col { a: Var, geom: ConvGeometry },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
    MseConst { a: Var, target: Mat },
    BceLogits { logits: Var, labels: Vec<f64> },
    KlRows { logits: Var, target: Var, reverse: bool, probs: Mat, row_kl: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; gradients never flow into it from outside.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "sub shape mismatch");
        out.add_scaled(self.value(b), -1.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a` (n x c) plus a broadcast row vector (1 x c).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let vr = self.value(row);
        assert_eq!(vr.rows(), 1);
        assert_eq!(vr.cols(), self.value(a).cols(), "add_row width mismatch");
        let vr = vr.data().to_vec();
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(&vr) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// `a` (r x n) plus a broadcast column vector (r x 1).
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let vc = self.value(col);
        assert_eq!(vc.cols(), 1);
        assert_eq!(vc.rows(), self.value(a).rows(), "add_col height mismatch");
        let vc = vc.data().to_vec();
        let mut out = self.value(a).clone();
        for (r, b) in vc.iter().enumerate() {
            for x in out.row_mut(r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::AddCol { a, col }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (1 x c each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), c);
        let mut xhat = Mat::zeros(n, c);
        let mut out = Mat::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).rows_slice(start, end);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Embedding lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Mat::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(vt.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Rows where `mask` is set are replaced by `row` (1 x c).
    pub fn replace_rows(&mut self, a: Var, row: Var, mask: &[bool]) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(mask.len(), out.rows());
        let vr = self.value(row).data().to_vec();
        assert_eq!(vr.len(), out.cols());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(&vr);
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::ReplaceRows { a, row, mask: mask.to_vec() }, ng)
    }

    /// `sum_i weights[i] * a[i]`, a 1 x c row.
    pub fn weighted_row_sum(&mut self, a: Var, weights: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(weights.len(), va.rows());
        let mut out = vec![0.0; va.cols()];
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, x) in out.iter_mut().zip(va.row(r)) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Mat::row_vector(out), Op::WeightedRowSum { a, weights: weights.to_vec() }, ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let n = out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            for x in out.row_mut(r) {
                *x /= n;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows { a, norms }, ng)
    }

    /// Unfolds a (C, H*W) feature map into (C*k*k, Ho*Wo) patch columns.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Var {
        let out = im2col(self.value(a), &geom);
        let ng = self.ng(a);
        self.push(out, Op::Im2Col { a, geom }, ng)
    }

    /// 2x2 stride-2 max pooling over a (C, H*W) feature map.
    pub fn max_pool2(&mut self, a: Var, height: usize, width: usize) -> Var {
        let va = self.value(a);
        let (oh, ow) = (height / 2, width / 2);
        let channels = va.rows();
        assert_eq!(va.cols(), height * width);
        let mut out = Mat::zeros(channels, oh * ow);
        let mut argmax = Vec::with_capacity(channels * oh * ow);
        for c in 0..channels {
            let row = va.row(c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (2 * oy + dy) * width + 2 * ox + dx;
                            if row[idx] > best_v || best == usize::MAX {
                                best_v = row[idx];
                                best = idx;
                            }
                        }
                    }
                    out.set(c, oy * ow + ox, best_v);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxPool2 { a, argmax }, ng)
    }

    /// Mean softmax cross-entropy over rows of `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len());
        let probs = softmax_rows(vl);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss += log_sum_exp(vl.row(r)) - vl.get(r, t);
        }
        loss /= targets.len() as f64;
        let ng = self.ng(logits);
        self.push(Mat::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Mean squared error against a constant target, averaged over all entries.
    pub fn mse_const(&mut self, a: Var, target: Mat) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape());
        let loss = va.data().iter().zip(target.data()).map(|(x, t)| (x - t) * (x - t)).sum::<f64>()
            / va.len() as f64;
        let ng = self.ng(a);
        self.push(Mat::scalar(loss), Op::MseConst { a, target }, ng)
    }

    /// Mean binary cross-entropy of sigmoid(logits) (n x 1) against labels.
    pub fn bce_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), labels.len());
        let loss = vl.data().iter().zip(labels).map(|(&x, &y)| bce_with_logit(x, y)).sum::<f64>()
            / labels.len() as f64;
        let ng = self.ng(logits);
        self.push(Mat::scalar(loss), Op::BceLogits { logits, labels: labels.to_vec() }, ng)
    }

    /// Mean over rows of `KL(softmax(logits) || target)`, or `KL(target || softmax(logits))`
    /// when `reverse`. `target` rows must be strictly positive distributions and
    /// receive no gradient.
    pub fn kl_rows(&mut self, logits: Var, target: Var, reverse: bool) -> Var {
        let vl = self.value(logits);
        let vt = self.value(target);
        assert_eq!(vl.shape(), vt.shape());
        let probs = softmax_rows(vl);
        let mut row_kl = Vec::with_capacity(vl.rows());
        for r in 0..vl.rows() {
            let lse = log_sum_exp(vl.row(r));
            let mut kl = 0.0;
            for j in 0..vl.cols() {
                let log_p = vl.get(r, j) - lse;
                let q = vt.get(r, j);
                kl += if reverse { q * (q.ln() - log_p) } else { probs.get(r, j) * (log_p - q.ln()) };
            }
            row_kl.push(kl);
        }
        let loss = row_kl.iter().sum::<f64>() / vl.rows() as f64;
        let ng = self.ng(logits);
        self.push(Mat::scalar(loss), Op::KlRows { logits, target, reverse, probs, row_kl }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::Sum(a), ng)
    }

    /// Back-propagates `seed * d(root)/d(·)` and returns per-node gradients.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let rv = self.value(root);
        grads[root.0] = Some(Mat::filled(rv.rows(), rv.cols(), seed));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = if *ta { matmul(vb, *tb, g, true) } else { matmul(g, false, vb, !*tb) };
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = if *tb { matmul(g, true, va, *ta) } else { matmul(va, !*ta, g, false) };
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Mat::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut d = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (o, x) in d.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *row, Mat::row_vector(d));
                }
            }
            Op::AddCol { a, col } => {
                self.acc(grads, *a, g.clone());
                if self.ng(*col) {
                    let d = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    self.acc(grads, *col, Mat::from_vec(g.rows(), 1, d));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g.data().iter().zip(va.data()).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect();
                self.acc(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g.data().iter().zip(va.data()).map(|(d, x)| d * gelu_grad(*x)).collect();
                self.acc(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = g.shape();
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let mut dx = Mat::zeros(n, c);
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        let out = dx.row_mut(r);
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            out[j] = inv_std[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += g.get(r, j) * xhat.get(r, j);
                            db[j] += g.get(r, j);
                        }
                    }
                    self.acc(grads, *gamma, Mat::row_vector(dg));
                    self.acc(grads, *beta, Mat::row_vector(db));
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.as_ref().expect("softmax value");
                let mut d = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for j in 0..g.cols() {
                        d.set(r, j, y.get(r, j) * (g.get(r, j) - dot));
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::SliceRows { a, start } => {
                if self.ng(*a) {
                    let va = self.value(*a);
                    let mut d = Mat::zeros(va.rows(), va.cols());
                    let c = va.cols();
                    d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    self.acc(grads, *a, d);
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let va = self.value(*a);
                    let mut d = Mat::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, g.rows_slice(off, off + rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Mat::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.acc(grads, p, d);
                    }
                    off += cols;
                }
            }
            Op::Gather { table, ids } => {
                if self.ng(*table) {
                    let vt = self.value(*table);
                    let mut d = Mat::zeros(vt.rows(), vt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *table, d);
                }
            }
            Op::ReplaceRows { a, row, mask } => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            d.row_mut(r).fill(0.0);
                        }
                    }
                    self.acc(grads, *a, d);
                }
                if self.ng(*row) {
                    let mut d = vec![0.0; g.cols()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, x) in d.iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    }
                    self.acc(grads, *row, Mat::row_vector(d));
                }
            }
            Op::WeightedRowSum { a, weights } => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(weights.len(), g.cols());
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            for (o, x) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                                *o = w * x;
                            }
                        }
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::NormalizeRows { a, norms } => {
                let y = node.value.as_ref().expect("normalize value");
                let mut d = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for j in 0..g.cols() {
                        d.set(r, j, (g.get(r, j) - y.get(r, j) * dot) / norms[r]);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Im2Col { a, geom } => {
                if self.ng(*a) {
                    self.acc(grads, *a, col2im(g, geom));
                }
            }
            Op::MaxPool2 { a, argmax } => {
                if self.ng(*a) {
                    let va = self.value(*a);
                    let mut d = Mat::zeros(va.rows(), va.cols());
                    let per = g.cols();
                    for c in 0..g.rows() {
                        for o in 0..per {
                            let idx = argmax[c * per + o];
                            let cur = d.get(c, idx);
                            d.set(c, idx, cur + g.get(c, o));
                        }
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = d.get(r, t);
                    d.set(r, t, v - 1.0);
                }
                d.scale_in_place(s);
                self.acc(grads, *logits, d);
            }
            Op::MseConst { a, target } => {
                let va = self.value(*a);
                let s = 2.0 * g.item() / va.len() as f64;
                let d = va.data().iter().zip(target.data()).map(|(x, t)| s * (x - t)).collect();
                self.acc(grads, *a, Mat::from_vec(va.rows(), va.cols(), d));
            }
            Op::BceLogits { logits, labels } => {
                let vl = self.value(*logits);
                let s = g.item() / labels.len() as f64;
                let d = vl.data().iter().zip(labels).map(|(&x, &y)| s * (sigmoid(x) - y)).collect();
                self.acc(grads, *logits, Mat::from_vec(vl.rows(), vl.cols(), d));
            }
            Op::KlRows { logits, target, reverse, probs, row_kl } => {
                let vt = self.value(*target);
                let s = g.item() / probs.rows() as f64;
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    let lse = log_sum_exp(self.value(*logits).row(r));
                    for j in 0..probs.cols() {
                        let p = probs.get(r, j);
                        let q = vt.get(r, j);
                        let v = if *reverse {
                            p - q
                        } else {
                            let log_p = self.value(*logits).get(r, j) - lse;
                            p * (log_p - q.ln() - row_kl[r])
                        };
                        d.set(r, j, s * v);
                    }
                }
                self.acc(grads, *logits, d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, Mat::filled(va.rows(), va.cols(), g.item()));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Collects gradients of every parameter touched by `graph` into `out`.
    pub fn accumulate_params(&self, graph: &Graph<'_>, out: &mut ParamGrads, scale: f64) {
        let mut entries: Vec<_> = graph.param_nodes.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (id, var) in entries {
            if let Some(g) = &self.grads[var.0] {
                out.accumulate(*id, g, scale);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-[y ln s(x) + (1-y) ln(1-s(x))]`.
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, x) in out.row_mut(r).iter_mut().zip(row) {
            *o = (x - mx).exp();
            z += *o;
        }
        for o in out.row_mut(r) {
            *o /= z;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn im2col(input: &Mat, g: &ConvGeometry) -> Mat {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    assert_eq!(input.rows(), g.channels);
    assert_eq!(input.cols(), g.height * g.width);
    let mut out = Mat::zeros(g.channels * k * k, oh * ow);
    for c in 0..g.channels {
        let src = input.row(c);
        for ki in 0..k {
            for kj in 0..k {
                let dst_row = (c * k + ki) * k + kj;
                let dst = out.row_mut(dst_row);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = src[iy as usize * g.width + ix as usize];
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &Mat, g: &ConvGeometry) -> Mat {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut out = Mat::zeros(g.channels, g.height * g.width);
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let src = cols.row((c * k + ki) * k + kj);
                let dst = out.row_mut(c);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(f)/d(input) against central differences.
    fn check(input: Mat, f: impl Fn(&mut Graph<'_>, Var) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(input.clone());
        let y = f(&mut g, x);
        let analytic = g.backward(y, 1.0).get(x).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.input(m);
                let y = f(&mut g, x);
                g.value(y).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
            assert!(err < 1e-5, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 4, 3);
        check(rand_mat(&mut rng, 3, 4), move |g, x| {
            let w = g.constant(w.clone());
            let y = g.matmul(x, w);
            let t = g.transpose(y);
            let s = g.slice_rows(t, 1, 3);
            let xr = g.slice_rows(x, 1, 3);
            let c = g.slice_cols(xr, 0, 2);
            let cc = g.concat_cols(&[s, c]);
            let cr = g.concat_rows(&[cc, cc]);
            let ge = g.gelu(cr);
            let sq = g.mul(ge, cr);
            g.sum(sq)
        });
    }

    #[test]
    fn layer_norm_softmax_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = rand_mat(&mut rng, 1, 5);
        let beta = rand_mat(&mut rng, 1, 5);
        let probe = rand_mat(&mut rng, 3, 5);
        check(rand_mat(&mut rng, 3, 5), move |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let y = g.layer_norm(x, ga, be);
            let s = g.softmax_rows(y);
            let n = g.normalize_rows(x);
            let a = g.add(s, n);
            let p = g.constant(probe.clone());
            let m = g.mul(a, p);
            g.sum(m)
        });
    }

    #[test]
    fn matmul_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_mat(&mut rng, 4, 3);
        check(rand_mat(&mut rng, 2, 3), move |g, x| {
            let b = g.constant(b.clone());
            let y = g.matmul_t(x, false, b, true);
            let z = g.matmul_t(y, true, x, false);
            let w = g.matmul_t(x, false, x, true);
            let s1 = g.sum(z);
            let s2 = g.sum(w);
            g.add(s1, s2)
        });
    }

    #[test]
    fn conv_pool_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeometry { channels: 2, height: 4, width: 4, kernel: 3, stride: 2, pad: 1 };
        let w = rand_mat(&mut rng, 3, 18);
        check(rand_mat(&mut rng, 2, 16), move |g, x| {
            let cols = g.im2col(x, geom);
            let w = g.constant(w.clone());
            let y = g.matmul(w, cols); // 3 x 4
            let r = g.relu(y);
            let p = g.max_pool2(r, 2, 2); // 3 x 1
            let pt = g.transpose(p);
            let ce = g.cross_entropy(pt, &[1]);
            let bce = g.bce_logits(p, &[1.0, 0.0, 1.0]);
            let mse = g.mse_const(y, Mat::filled(3, 4, 0.25));
            let a = g.add(ce, bce);
            g.add(a, mse)
        });
    }

    #[test]
    fn kl_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = softmax_rows(&rand_mat(&mut rng, 2, 3));
        for reverse in [false, true] {
            let t = target.clone();
            check(rand_mat(&mut rng, 2, 3), move |g, x| {
                let t = g.constant(t.clone());
                g.kl_rows(x, t, reverse)
            });
        }
    }

    #[test]
    fn gather_replace_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row = rand_mat(&mut rng, 1, 3);
        check(rand_mat(&mut rng, 4, 3), move |g, x| {
            let e = g.gather(x, &[2, 0, 2]);
            let r = g.constant(row.clone());
            let rep = g.replace_rows(x, r, &[true, false, false, true]);
            let pooled = g.weighted_row_sum(rep, &[0.5, 0.0, 0.25, 0.25]);
            let ar = g.add_row(e, pooled);
            let col = g.slice_cols(ar, 0, 1);
            let ac = g.add_col(ar, col);
            let sc = g.scale(ac, 0.3);
            let sq = g.mul(sc, sc);
            g.sum(sq)
        });
    }

    #[test]
    fn kl_zero_when_distributions_match() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = Mat::from_vec(1, 3, vec![0.3, -1.2, 2.0]);
        let target = softmax_rows(&logits);
        let l = g.input(logits);
        let t = g.constant(target);
        let kl = g.kl_rows(l, t, false);
        assert!(g.value(kl).item().abs() < 1e-12);
        let grads = g.backward(kl, 1.0);
        assert!(grads.get(t).is_none());
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(50.0, 1.0) < 1e-20);
    }
}
