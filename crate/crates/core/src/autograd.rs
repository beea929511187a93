//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns per-node gradients. Parameters enter the tape through
//! [`Graph::param`] so their gradients can be collected by [`ParamId`].

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use rayon::prelude::*;

use crate::params::{ParamGrads, ParamId, ParamStore};

pub type Mat = Array2<f64>;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Which direction a normalization reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Statistics per row, across columns (transformer layer norm).
    Row,
    /// Statistics per column, across rows (per-channel norm over voxels).
    Column,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Max,
    Mean,
}

/// Neighborhood table for a sparse convolution: for each output row and
/// kernel tap, the input row it reads (or none).
#[derive(Clone, Debug)]
pub struct Rulebook {
    pub n_out: usize,
    pub n_in: usize,
    pub taps: usize,
    /// Row-major `n_out x taps`, `u32::MAX` marks an absent neighbor.
    pub neighbors: Vec<u32>,
}

impl Rulebook {
    pub const ABSENT: u32 = u32::MAX;

    pub fn neighbor(&self, out: usize, tap: usize) -> Option<usize> {
        let v = self.neighbors[out * self.taps + tap];
        (v != Self::ABSENT).then_some(v as usize)
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Linear(NodeId, NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Transpose(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: NormAxis,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Mat>,
    },
    SparseConv {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        rules: Arc<Rulebook>,
        cols: Option<Mat>,
    },
    Gather {
        x: NodeId,
        index: Arc<Vec<usize>>,
    },
    SegmentMean {
        x: NodeId,
        segment: Arc<Vec<usize>>,
        counts: Vec<f64>,
    },
    GroupCols {
        x: NodeId,
        groups: Arc<Vec<usize>>,
        mode: Reduce,
        counts: Vec<f64>,
        argmax: Vec<usize>,
    },
    WeightedSum {
        x: NodeId,
        weights: Mat,
    },
    ScalarFn {
        x: NodeId,
        grad: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    keep_caches: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that keeps everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            keep_caches: true,
        }
    }

    /// A tape for inference only. Large backward caches are dropped;
    /// calling `backward` on it is a programming error.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            keep_caches: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by graph op"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// A constant leaf whose gradient is still tracked.
    pub fn input_with_grad(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x · w + b` with `b` a `1 x C` row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(b).0, 1, "linear bias must be a single row");
        let mut value = self.value(x).dot(self.value(w));
        value += self.value(b);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Linear(x, w, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the single-row matrix `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1xC operand");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows column mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    /// Normalization with learned per-channel scale and shift (`1 x C`).
    pub fn norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, axis: NormAxis) -> NodeId {
        let input = self.value(x);
        let (xhat, inv_std) = normalize(input, axis);
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q` (Nq x D), `k` and `v` (Nk x D). `mask` is additive: `0` where
    /// attendable, `-inf` where blocked. Heads split the columns evenly.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<&Mat>,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.dim();
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        assert_eq!(kv.dim(), (vv.nrows(), d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let per_head: Vec<(Mat, Mat)> = (0..heads)
            .into_par_iter()
            .map(|h| {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
                if let Some(mask) = mask {
                    scores += mask;
                }
                softmax_rows_inplace(&mut scores);
                let out = scores.dot(&vv.slice(cols));
                (scores, out)
            })
            .collect();

        let mut value = Mat::zeros((nq, d));
        let mut probs = Vec::with_capacity(heads);
        for (h, (p, out)) in per_head.into_iter().enumerate() {
            value.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
            probs.push(p);
        }
        if !self.keep_caches {
            probs.clear();
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// `out[o] = Σ_t x[neighbor(o, t)] · W_t (+ bias)` with `W` stacked as
    /// `(taps * C_in) x C_out`.
    pub fn sparse_conv(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        rules: Arc<Rulebook>,
    ) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), rules.n_in, "rulebook input size mismatch");
        let cin = xv.ncols();
        assert_eq!(self.shape(weight).0, rules.taps * cin, "kernel shape mismatch");
        let cols = im2col(xv, &rules);
        let mut value = cols.dot(self.value(weight));
        if let Some(b) = bias {
            value += self.value(b);
        }
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let cols = self.keep_caches.then_some(cols);
        self.push(
            value,
            Op::SparseConv {
                x,
                weight,
                bias,
                rules,
                cols,
            },
            rg,
        )
    }

    /// `out[i] = x[index[i]]`
    pub fn gather(&mut self, x: NodeId, index: Arc<Vec<usize>>) -> NodeId {
        let xv = self.value(x);
        let mut value = Mat::zeros((index.len(), xv.ncols()));
        for (mut row, &i) in value.rows_mut().into_iter().zip(index.iter()) {
            row.assign(&xv.row(i));
        }
        let rg = self.rg(x);
        self.push(value, Op::Gather { x, index }, rg)
    }

    /// Averages rows of `x` sharing a segment id into `n_segments` rows.
    /// Every segment must be non-empty.
    pub fn segment_mean(&mut self, x: NodeId, segment: Arc<Vec<usize>>, n_segments: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segment.len());
        let mut value = Mat::zeros((n_segments, xv.ncols()));
        let mut counts = vec![0.0; n_segments];
        for (row, &s) in xv.rows().into_iter().zip(segment.iter()) {
            let mut out = value.row_mut(s);
            out += &row;
            counts[s] += 1.0;
        }
        for (mut row, &c) in value.rows_mut().into_iter().zip(&counts) {
            assert!(c > 0.0, "empty segment in segment_mean");
            row /= c;
        }
        let rg = self.rg(x);
        self.push(value, Op::SegmentMean { x, segment, counts }, rg)
    }

    /// Reduces the columns of `x` sharing a group id. Output has one column
    /// per group; `max` ties resolve to the first column.
    pub fn group_cols(
        &mut self,
        x: NodeId,
        groups: Arc<Vec<usize>>,
        n_groups: usize,
        mode: Reduce,
    ) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(cols, groups.len());
        let mut counts = vec![0.0; n_groups];
        for &g in groups.iter() {
            counts[g] += 1.0;
        }
        assert!(counts.iter().all(|&c| c > 0.0), "empty group in group_cols");
        let mut value = Mat::zeros((rows, n_groups));
        let mut argmax = Vec::new();
        match mode {
            Reduce::Max => {
                value.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; rows * n_groups];
                for r in 0..rows {
                    for (c, &g) in groups.iter().enumerate() {
                        let v = xv[[r, c]];
                        if v > value[[r, g]] || argmax[r * n_groups + g] == usize::MAX {
                            value[[r, g]] = v;
                            argmax[r * n_groups + g] = c;
                        }
                    }
                }
            }
            Reduce::Mean => {
                for r in 0..rows {
                    for (c, &g) in groups.iter().enumerate() {
                        value[[r, g]] += xv[[r, c]];
                    }
                }
                for (mut col, &c) in value.columns_mut().into_iter().zip(&counts) {
                    col /= c;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            value,
            Op::GroupCols {
                x,
                groups,
                mode,
                counts,
                argmax,
            },
            rg,
        )
    }

    /// Scalar `Σ x ⊙ weights`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Mat) -> NodeId {
        assert_eq!(self.shape(x), weights.dim());
        let total = (self.value(x) * &weights).sum();
        let rg = self.rg(x);
        self.push(Mat::from_elem((1, 1), total), Op::WeightedSum { x, weights }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let w = Mat::ones(self.shape(x));
        self.weighted_sum(x, w)
    }

    /// A scalar computed outside the tape from `x`, with its gradient.
    pub fn scalar_fn(&mut self, x: NodeId, value: f64, grad: Mat) -> NodeId {
        assert_eq!(self.shape(x), grad.dim());
        let rg = self.rg(x);
        self.push(Mat::from_elem((1, 1), value), Op::ScalarFn { x, grad }, rg)
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.backward_seeded(&[(root, Mat::ones((1, 1)))])
    }

    /// Backpropagates arbitrary upstream gradients into the tape.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Mat)]) -> Gradients {
        assert!(self.keep_caches, "backward on an inference-only graph");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, g) in seeds {
            assert_eq!(self.shape(*id), g.dim(), "seed gradient shape mismatch");
            accumulate(&mut grads, *id, g.clone());
            last = last.max(id.0);
        }
        for idx in (0..=last).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &grad, &mut grads);
            }
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, grad: &Mat, grads: &mut [Option<Mat>]) {
        let want = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, grad.dot(&self.value(*b).t()));
                }
                if want(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(grad));
                }
            }
            Op::Linear(x, w, b) => {
                if want(*x) {
                    accumulate(grads, *x, grad.dot(&self.value(*w).t()));
                }
                if want(*w) {
                    accumulate(grads, *w, self.value(*x).t().dot(grad));
                }
                if want(*b) {
                    accumulate(grads, *b, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMulT(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, grad.dot(self.value(*b)));
                }
                if want(*b) {
                    accumulate(grads, *b, grad.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, grad.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, grad.clone());
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    accumulate(grads, *a, grad.clone());
                }
                if want(*row) {
                    accumulate(grads, *row, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, grad * *f),
            Op::Relu(a) => {
                let mut g = grad.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
                accumulate(grads, *a, g);
            }
            Op::Transpose(a) => accumulate(grads, *a, grad.t().to_owned()),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                if want(*a) {
                    accumulate(grads, *a, grad.slice(s![.., ..ca]).to_owned());
                }
                if want(*b) {
                    accumulate(grads, *b, grad.slice(s![.., ca..]).to_owned());
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.shape(*a).0;
                if want(*a) {
                    accumulate(grads, *a, grad.slice(s![..ra, ..]).to_owned());
                }
                if want(*b) {
                    accumulate(grads, *b, grad.slice(s![ra.., ..]).to_owned());
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                if want(*gamma) {
                    accumulate(grads, *gamma, (grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if want(*beta) {
                    accumulate(grads, *beta, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if want(*x) {
                    let dxhat = grad * self.value(*gamma);
                    accumulate(grads, *x, normalize_backward(&dxhat, xhat, inv_std, *axis));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let parts: Vec<(Mat, Mat, Mat)> = (0..*heads)
                    .into_par_iter()
                    .map(|h| {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let p = &probs[h];
                        let go = grad.slice(cols);
                        let dv = p.t().dot(&go);
                        let dp = go.dot(&vv.slice(cols).t());
                        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = (dp - &row_dot) * p * scale;
                        let dq = ds.dot(&kv.slice(cols));
                        let dk = ds.t().dot(&qv.slice(cols));
                        (dq, dk, dv)
                    })
                    .collect();
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                for (h, (gq, gk, gv)) in parts.into_iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    dq.slice_mut(cols).assign(&gq);
                    dk.slice_mut(cols).assign(&gk);
                    dv.slice_mut(cols).assign(&gv);
                }
                if want(*q) {
                    accumulate(grads, *q, dq);
                }
                if want(*k) {
                    accumulate(grads, *k, dk);
                }
                if want(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::SparseConv {
                x,
                weight,
                bias,
                rules,
                cols,
            } => {
                let cols = cols.as_ref().expect("sparse conv cache missing");
                if want(*weight) {
                    accumulate(grads, *weight, cols.t().dot(grad));
                }
                if let Some(b) = bias {
                    if want(*b) {
                        accumulate(grads, *b, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                if want(*x) {
                    let dcols = grad.dot(&self.value(*weight).t());
                    let cin = self.shape(*x).1;
                    let mut dx = Mat::zeros((rules.n_in, cin));
                    for o in 0..rules.n_out {
                        for t in 0..rules.taps {
                            if let Some(i) = rules.neighbor(o, t) {
                                let mut row = dx.row_mut(i);
                                row += &dcols.slice(s![o, t * cin..(t + 1) * cin]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { x, index } => {
                let mut dx = Mat::zeros(self.shape(*x));
                for (row, &i) in grad.rows().into_iter().zip(index.iter()) {
                    let mut out = dx.row_mut(i);
                    out += &row;
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentMean { x, segment, counts } => {
                let mut dx = Mat::zeros(self.shape(*x));
                for (mut row, &s) in dx.rows_mut().into_iter().zip(segment.iter()) {
                    row.assign(&(&grad.row(s) / counts[s]));
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupCols {
                x,
                groups,
                mode,
                counts,
                argmax,
            } => {
                let (rows, cols) = self.shape(*x);
                let n_groups = counts.len();
                let mut dx = Mat::zeros((rows, cols));
                match mode {
                    Reduce::Max => {
                        for r in 0..rows {
                            for g in 0..n_groups {
                                dx[[r, argmax[r * n_groups + g]]] += grad[[r, g]];
                            }
                        }
                    }
                    Reduce::Mean => {
                        for r in 0..rows {
                            for (c, &g) in groups.iter().enumerate() {
                                dx[[r, c]] = grad[[r, g]] / counts[g];
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::WeightedSum { x, weights } => accumulate(grads, *x, weights * grad[[0, 0]]),
            Op::ScalarFn { x, grad: local } => accumulate(grads, *x, local * grad[[0, 0]]),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Sums gradients of every parameter leaf on `graph` by parameter id.
    pub fn params(&self, graph: &Graph, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (node, grad) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                out.add(*id, g);
            }
        }
        out
    }
}

pub fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(max.is_finite(), "softmax over a fully blocked row");
        let mut total = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            total += e;
            e
        });
        row /= total;
    }
}

fn normalize(x: &Mat, axis: NormAxis) -> (Mat, Vec<f64>) {
    let reduce = match axis {
        NormAxis::Row => Axis(1),
        NormAxis::Column => Axis(0),
    };
    let n = x.len_of(reduce) as f64;
    let mean = x.sum_axis(reduce) / n;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(mean.len());
    for (mut lane, &mu) in xhat.lanes_mut(reduce).into_iter().zip(mean.iter()) {
        lane -= mu;
        let var = lane.iter().map(|v| v * v).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        lane *= inv;
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

fn normalize_backward(dxhat: &Mat, xhat: &Mat, inv_std: &[f64], axis: NormAxis) -> Mat {
    let reduce = match axis {
        NormAxis::Row => Axis(1),
        NormAxis::Column => Axis(0),
    };
    let n = xhat.len_of(reduce) as f64;
    let mut dx = dxhat.clone();
    for ((mut lane, xh), &inv) in dx
        .lanes_mut(reduce)
        .into_iter()
        .zip(xhat.lanes(reduce))
        .zip(inv_std)
    {
        let mean_d = lane.sum() / n;
        let mean_dx = lane.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        Zip::from(&mut lane)
            .and(&xh)
            .for_each(|d, &h| *d = inv * (*d - mean_d - h * mean_dx));
    }
    dx
}

fn im2col(x: &Mat, rules: &Rulebook) -> Mat {
    let cin = x.ncols();
    let width = rules.taps * cin;
    let mut cols = Mat::zeros((rules.n_out, width));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    cols.as_slice_mut()
        .expect("fresh matrix is contiguous")
        .par_chunks_mut(width.max(1))
        .enumerate()
        .for_each(|(o, row)| {
            for t in 0..rules.taps {
                if let Some(i) = rules.neighbor(o, t) {
                    row[t * cin..(t + 1) * cin].copy_from_slice(&src[i * cin..(i + 1) * cin]);
                }
            }
        });
    cols
}
