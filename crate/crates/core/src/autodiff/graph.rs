use std::borrow::Cow;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::array::{matmul, matmul_nt, matmul_tn};
use super::{Array, Gradients, Params};
use crate::error::{Error, Result};
use crate::graph::TemporalGraphTensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvEntry {
    src: u32,
    dst: u32,
    slot: u32,
    sample: u32,
}

/// Sparsity pattern of a batch of temporal-graph tensors, prepared for
/// [`Graph::sparse_conv3d`]. Entry values are supplied separately so they
/// can themselves be differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayout {
    pub n_nodes: usize,
    pub n_slots: usize,
    pub depth: usize,
    pub stride: usize,
    pub batch: usize,
    entries: Vec<ConvEntry>,
}

impl ConvLayout {
    pub fn new(tensors: &[&TemporalGraphTensor], depth: usize, stride: usize) -> Result<Self> {
        let (n_nodes, n_slots) = match tensors.first() {
            Some(t) => (t.n_nodes, t.n_slots),
            None => return Err(Error::Shape("empty batch".into())),
        };
        if depth == 0 || depth > n_slots {
            return Err(Error::Config(format!(
                "filter depth {depth} must lie in 1..={n_slots}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let mut entries = Vec::with_capacity(tensors.iter().map(|t| t.nnz()).sum());
        for (b, t) in tensors.iter().enumerate() {
            if (t.n_nodes, t.n_slots) != (n_nodes, n_slots) {
                return Err(Error::Shape(format!(
                    "tensor {b} is {}x{}x{}, batch is {n_nodes}x{n_nodes}x{n_slots}",
                    t.n_nodes, t.n_nodes, t.n_slots
                )));
            }
            entries.extend(t.entries.iter().map(|e| ConvEntry {
                src: e.src,
                dst: e.dst,
                slot: e.slot,
                sample: b as u32,
            }));
        }
        Ok(ConvLayout {
            n_nodes,
            n_slots,
            depth,
            stride,
            batch: tensors.len(),
            entries,
        })
    }

    /// Output positions L = floor((K - d) / stride) + 1.
    pub fn out_len(&self) -> usize {
        (self.n_slots - self.depth) / self.stride + 1
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Output positions whose window `[l*stride, l*stride + d)` covers `slot`.
    fn positions(&self, slot: usize) -> std::ops::RangeInclusive<usize> {
        let s = self.stride;
        let lo = if slot + 1 > self.depth {
            (slot + 1 - self.depth).div_ceil(s)
        } else {
            0
        };
        let hi = (slot / s).min(self.out_len() - 1);
        lo..=hi
    }

    /// `out[(l * batch + b) * F + f]`, touching only the stored entries.
    fn forward(&self, values: &[f64], filters: &[f64], n_filters: usize) -> Vec<f64> {
        let (v, d, batch) = (self.n_nodes, self.depth, self.batch);
        let filter_stride = v * v * d;
        let mut out = vec![0.0; self.out_len() * batch * n_filters];
        for (e, &val) in self.entries.iter().zip(values) {
            if val == 0.0 {
                continue;
            }
            let base = (e.src as usize * v + e.dst as usize) * d;
            let slot = e.slot as usize;
            for l in self.positions(slot) {
                let w0 = base + slot - l * self.stride;
                let row = &mut out[(l * batch + e.sample as usize) * n_filters..][..n_filters];
                for (f, o) in row.iter_mut().enumerate() {
                    *o += filters[f * filter_stride + w0] * val;
                }
            }
        }
        out
    }

    fn backward(
        &self,
        values: &[f64],
        filters: &[f64],
        n_filters: usize,
        grad_out: &[f64],
        grad_values: Option<&mut [f64]>,
        grad_filters: Option<&mut [f64]>,
    ) {
        let (v, d, batch) = (self.n_nodes, self.depth, self.batch);
        let filter_stride = v * v * d;
        let mut gv = grad_values;
        let mut gf = grad_filters;
        for (idx, (e, &val)) in self.entries.iter().zip(values).enumerate() {
            let base = (e.src as usize * v + e.dst as usize) * d;
            let slot = e.slot as usize;
            let mut acc = 0.0;
            for l in self.positions(slot) {
                let w0 = base + slot - l * self.stride;
                let g = &grad_out[(l * batch + e.sample as usize) * n_filters..][..n_filters];
                for (f, &gf_out) in g.iter().enumerate() {
                    acc += filters[f * filter_stride + w0] * gf_out;
                    if let Some(gw) = gf.as_deref_mut() {
                        gw[f * filter_stride + w0] += val * gf_out;
                    }
                }
            }
            if let Some(gvals) = gv.as_deref_mut() {
                gvals[idx] += acc;
            }
        }
    }
}

/// Shape of a filter bank `[F, V, V, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterDims {
    pub n_filters: usize,
    pub n_nodes: usize,
    pub depth: usize,
}

impl FilterDims {
    pub fn of(a: &Array) -> FilterDims {
        match a.shape()[..] {
            [f, v, v2, d] if v == v2 => FilterDims {
                n_filters: f,
                n_nodes: v,
                depth: d,
            },
            _ => panic!("filter bank must be [F, V, V, d], got {:?}", a.shape()),
        }
    }
}

/// Walk-continuity penalty of a filter bank: for every filter and pair of
/// consecutive slices, the absolute mismatch between each node's incoming
/// weight mass at one step and its outgoing mass at the next, averaged over
/// filters.
pub fn graph_regularizer_value(filters: &Array) -> f64 {
    let FilterDims {
        n_filters,
        n_nodes: v,
        depth: d,
    } = FilterDims::of(filters);
    let w = filters.data();
    let at = |f: usize, i: usize, j: usize, t: usize| w[((f * v + i) * v + j) * d + t];
    let mut total = 0.0;
    for f in 0..n_filters {
        for t in 0..d.saturating_sub(1) {
            for node in 0..v {
                let incoming: f64 = (0..v).map(|i| at(f, i, node, t).abs()).sum();
                let outgoing: f64 = (0..v).map(|j| at(f, node, j, t + 1).abs()).sum();
                total += (incoming - outgoing).abs();
            }
        }
    }
    total / n_filters as f64
}

fn graph_regularizer_grad(filters: &Array, g: f64, out: &mut [f64]) {
    let FilterDims {
        n_filters,
        n_nodes: v,
        depth: d,
    } = FilterDims::of(filters);
    let w = filters.data();
    let idx = |f: usize, i: usize, j: usize, t: usize| ((f * v + i) * v + j) * d + t;
    let scale = g / n_filters as f64;
    for f in 0..n_filters {
        for t in 0..d.saturating_sub(1) {
            for node in 0..v {
                let incoming: f64 = (0..v).map(|i| w[idx(f, i, node, t)].abs()).sum();
                let outgoing: f64 = (0..v).map(|j| w[idx(f, node, j, t + 1)].abs()).sum();
                let s = sign(incoming - outgoing) * scale;
                if s == 0.0 {
                    continue;
                }
                for i in 0..v {
                    let k = idx(f, i, node, t);
                    out[k] += s * sign(w[k]);
                }
                for j in 0..v {
                    let k = idx(f, node, j, t + 1);
                    out[k] -= s * sign(w[k]);
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Probability clamp used inside the cross-entropy logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum BatchNormMode<'m> {
    /// Normalise with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalise with stored running moments.
    Infer {
        mean: &'m [f64],
        var: &'m [f64],
        eps: f64,
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    SparseConv3d {
        values: Var,
        filters: Var,
        layout: Rc<ConvLayout>,
    },
    Exp(Var),
    Neg(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Mul(Var, Var),
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Option<Vec<f64>>,
        batch_var: Option<Vec<f64>>,
        train: bool,
    },
    Dropout(Var, Vec<f64>),
    Softplus(Var),
    L1(Var),
    L2(Var),
    GraphReg(Var),
    SliceRows(Var, usize, usize),
    Sum(Var),
    Bce(Var, Vec<f64>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            SparseConv3d {
                values, filters, ..
            } => vec![*values, *filters],
            Exp(x) | Neg(x) | Scale(x, _) | Sigmoid(x) | Tanh(x) | LeakyRelu(x, _) | Dropout(x, _)
            | Softplus(x) | L1(x) | L2(x) | GraphReg(x) | SliceRows(x, _, _) | Sum(x) | Bce(x, _) => {
                vec![*x]
            }
            ScaleBy(a, b) | MatMul(a, b) | Add(a, b) | AddBias(a, b) | Mul(a, b) => vec![*a, *b],
            Concat(xs) => xs.clone(),
            BatchNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Array>,
    op: Op,
    param: Option<String>,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Parameters are borrowed, intermediate values are owned. Nodes are
/// appended in evaluation order, so reverse index order is a valid reverse
/// topological order.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: &'a Array) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    /// [`Graph::param`] looked up by name in `params`.
    pub fn param_from(&mut self, params: &'a Params, name: &str) -> Result<Var> {
        let value = params
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter '{name}'")))?;
        Ok(self.param(name, value))
    }

    /// Batched sparse 3-D convolution. `values` holds one value per layout
    /// entry, `filters` is `[F, V, V, d]`. Output is `[L * batch, F]` with
    /// row `l * batch + b`.
    pub fn sparse_conv3d(&mut self, values: Var, filters: Var, layout: Rc<ConvLayout>) -> Var {
        let dims = FilterDims::of(self.value(filters));
        assert_eq!(self.value(values).len(), layout.nnz(), "one value per entry");
        assert_eq!(dims.n_nodes, layout.n_nodes, "filter and tensor node counts differ");
        assert_eq!(dims.depth, layout.depth, "filter depth differs from layout");
        let out = layout.forward(self.data(values), self.data(filters), dims.n_filters);
        let shape = [layout.out_len() * layout.batch, dims.n_filters];
        self.push(
            Array::new(shape.to_vec(), out),
            Op::SparseConv3d {
                values,
                filters,
                layout,
            },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        self.push(y, Op::Exp(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| -v);
        self.push(y, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    /// `x * s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::ScaleBy(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let out = matmul(self.data(a), self.data(b), n, k, m);
        self.push(Array::matrix(n, m, out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    /// Adds a length-C bias to every row of an `[N, C]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, c) = self.value(x).dims2();
        assert_eq!(self.value(b).len(), c, "bias length");
        let bias = self.data(b).to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        self.push(y, Op::AddBias(x, b))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(y, Op::LeakyRelu(x, slope))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let y = Array::new(self.value(a).shape().to_vec(), data);
        self.push(y, Op::Mul(a, b))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let rows = self.value(xs[0]).dims2().0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (r, c) = self.value(x).dims2();
                assert_eq!(r, rows, "concat row counts");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[r * w..(r + 1) * w]);
            }
        }
        self.push(Array::matrix(rows, total, out), Op::Concat(xs.to_vec()))
    }

    /// Per-column normalisation of an `[N, C]` matrix followed by a
    /// per-column affine map.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, mode: BatchNormMode<'_>) -> Var {
        let (n, c) = self.value(x).dims2();
        assert_eq!(self.value(scale).len(), c);
        assert_eq!(self.value(shift).len(), c);
        let xs = self.data(x);
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                for row in xs.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xs.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, eps, true)
            }
            BatchNormMode::Infer { mean, var, eps } => (mean.to_vec(), var.to_vec(), eps, false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        for (row, out) in xs.chunks(c).zip(xhat.chunks_mut(c)) {
            for j in 0..c {
                out[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.data(scale), self.data(shift));
        let mut y = vec![0.0; n * c];
        for (yr, xr) in y.chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                yr[j] = g[j] * xr[j] + b[j];
            }
        }
        let (batch_mean, batch_var) = if train {
            (Some(mean), Some(var))
        } else {
            (None, None)
        };
        self.push(
            Array::matrix(n, c, y),
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                train,
            },
        )
    }

    /// Batch mean and (biased) variance recorded by a training-mode
    /// batch-norm node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_mean: Some(m),
                batch_var: Some(s),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let y = Array::new(self.value(x).shape().to_vec(), data);
        self.push(y, Op::Dropout(x, mask))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        self.push(y, Op::Softplus(x))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v.abs()).sum();
        self.push(Array::scalar(s), Op::L1(x))
    }

    /// Sum of squares.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v * v).sum();
        self.push(Array::scalar(s), Op::L2(x))
    }

    pub fn graph_regularizer(&mut self, filters: Var) -> Var {
        let s = graph_regularizer_value(self.value(filters));
        self.push(Array::scalar(s), Op::GraphReg(filters))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, c) = self.value(x).dims2();
        assert!(start <= end && end <= n, "row slice {start}..{end} of {n}");
        let data = self.data(x)[start * c..end * c].to_vec();
        self.push(Array::matrix(end - start, c, data), Op::SliceRows(x, start, end))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels,
    /// with probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.data(logits);
        assert_eq!(z.len(), labels.len(), "one label per logit");
        let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let p = clamp(sigmoid(z));
                let q = clamp(sigmoid(-z));
                -(y * p.ln() + (1.0 - y) * q.ln())
            })
            .sum();
        let loss = total / z.len() as f64;
        self.push(Array::scalar(loss), Op::Bce(logits, labels.to_vec()))
    }

    /// Reverse sweep from a one-element `loss`. Returns a gradient for every
    /// parameter leaf on the graph, zero where the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));
        let mut out: BTreeMap<String, Array> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Some(p) = node.op.parents().iter().find(|p| p.0 >= i) {
                return Err(Error::Internal(format!(
                    "cycle: node {i} depends on node {}",
                    p.0
                )));
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            if let Some(name) = &node.param {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }

        let mut result = Gradients::new();
        for node in &self.nodes {
            if let Some(name) = &node.param {
                let g = out.remove(name).unwrap_or_else(|| node.value.zeros_like());
                if !result.contains(name) {
                    result.insert(name.clone(), g);
                }
            }
        }
        Ok(result)
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| self.value(v).zeros_like());
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::SparseConv3d {
                values,
                filters,
                layout,
            } => {
                let nf = FilterDims::of(self.value(*filters)).n_filters;
                let vals = self.data(*values);
                let w = self.data(*filters);
                let mut gv = vec![0.0; vals.len()];
                let mut gw = vec![0.0; w.len()];
                layout.backward(vals, w, nf, gd, Some(&mut gv), Some(&mut gw));
                acc(*values, &mut |d| add_into(d, &gv));
                acc(*filters, &mut |d| add_into(d, &gw));
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                    *d += g * y;
                }
            }),
            Op::Neg(x) => acc(*x, &mut |d| {
                for (d, g) in d.iter_mut().zip(gd) {
                    *d -= g;
                }
            }),
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (d, g) in d.iter_mut().zip(gd) {
                    *d += c * g;
                }
            }),
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                acc(*x, &mut |d| {
                    for (d, g) in d.iter_mut().zip(gd) {
                        *d += c * g;
                    }
                });
                let xs = self.data(*x);
                let ds: f64 = gd.iter().zip(xs).map(|(g, x)| g * x).sum();
                acc(*s, &mut |d| d[0] += ds);
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2();
                let (_, m) = self.value(*b).dims2();
                let da = matmul_nt(gd, self.data(*b), n, m, k);
                let db = matmul_tn(self.data(*a), gd, n, k, m);
                acc(*a, &mut |d| add_into(d, &da));
                acc(*b, &mut |d| add_into(d, &db));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| add_into(d, gd));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, gd));
                let c = self.value(*b).len();
                acc(*b, &mut |d| {
                    for row in gd.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::LeakyRelu(x, slope) => {
                let xs = self.data(*x);
                acc(*x, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(xs) {
                        *d += if *x > 0.0 { *g } else { slope * g };
                    }
                })
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((d, g), b) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * b;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), a) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Concat(xs) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).dims2().1;
                    acc(x, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &gd[r * total + offset..][..w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let (n, c) = node.value.dims2();
                let gamma = self.data(*scale);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (gr, xr) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gamma[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xr[j];
                    }
                }
                let nf = n as f64;
                acc(*x, &mut |d| {
                    for ((dr, gr), xr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dxh = gr[j] * gamma[j];
                            dr[j] += if *train {
                                inv_std[j] * (dxh - sum_dxhat[j] / nf - xr[j] * sum_dxhat_xhat[j] / nf)
                            } else {
                                inv_std[j] * dxh
                            };
                        }
                    }
                });
                acc(*scale, &mut |d| add_into(d, &dgamma));
                acc(*shift, &mut |d| add_into(d, &dbeta));
            }
            Op::Dropout(x, mask) => acc(*x, &mut |d| {
                for ((d, g), m) in d.iter_mut().zip(gd).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::Softplus(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(xs) {
                        *d += g * sigmoid(*x);
                    }
                })
            }
            Op::L1(x) => {
                let (g0, xs) = (gd[0], self.data(*x));
                acc(*x, &mut |d| {
                    for (d, x) in d.iter_mut().zip(xs) {
                        *d += g0 * sign(*x);
                    }
                })
            }
            Op::L2(x) => {
                let (g0, xs) = (gd[0], self.data(*x));
                acc(*x, &mut |d| {
                    for (d, x) in d.iter_mut().zip(xs) {
                        *d += 2.0 * g0 * x;
                    }
                })
            }
            Op::GraphReg(x) => {
                let filters = self.value(*x);
                acc(*x, &mut |d| graph_regularizer_grad(filters, gd[0], d));
            }
            Op::SliceRows(x, start, end) => {
                let c = node.value.dims2().1;
                acc(*x, &mut |d| add_into(&mut d[start * c..end * c], gd));
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += gd[0])),
            Op::Bce(x, labels) => {
                let zs = self.data(*x);
                let n = zs.len() as f64;
                // The clamp only guards the logarithm; the gradient is that
                // of the unclamped loss so saturated logits still recover.
                acc(*x, &mut |d| {
                    for ((d, z), y) in d.iter_mut().zip(zs).zip(labels) {
                        *d += gd[0] * (sigmoid(*z) - y) / n;
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
impl Graph<'_> {
    /// Records a node that depends on itself, which no public method can do.
    pub(crate) fn push_self_loop(&mut self) -> Var {
        let v = Var(self.nodes.len());
        self.push(Array::scalar(0.0), Op::Neg(v))
    }
}
