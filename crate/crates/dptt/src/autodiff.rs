//! Reverse-mode differentiation over a flat tape of primitive ops.
//!
//! A [`Tape`] records a forward computation as a topologically ordered list
//! of nodes; [`Tape::grad`] replays it backwards and returns gradients for
//! a requested set of named parameters. Parameter leaves borrow their
//! tensors from the owning model, so building a tape never copies weights.
//!
//! Per-example gradients — the quantity DP-SGD clips — are obtained by
//! replaying the backward pass once per example ([`per_example_grads`]).
//! Examples may be processed in parallel; results are collected in example
//! order, so the output is independent of thread scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;

use crate::tensor::{self, Tensor};

/// Gradients keyed by parameter name. `BTreeMap` so iteration order is
/// deterministic.
pub type GradMap = BTreeMap<String, Tensor>;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Slot<'m> {
    Owned(Tensor),
    Param(&'m Tensor),
}

impl Slot<'_> {
    #[inline]
    fn tensor(&self) -> &Tensor {
        match self {
            Slot::Owned(t) => t,
            Slot::Param(t) => t,
        }
    }
}

/// Primitive operations the tape understands.
#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf: a constant input or a named parameter.
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    /// Row-vector bias broadcast over the rows of the first input.
    AddBias(ValueId, ValueId),
    Relu(ValueId),
    SoftmaxRows(ValueId),
    LayerNormRows { x: ValueId, gamma: ValueId, beta: ValueId },
    /// One row of an embedding table.
    GatherRow { table: ValueId, row: usize },
    ConcatCols(Vec<ValueId>),
    ConcatRows(Vec<ValueId>),
    SliceCols { x: ValueId, start: usize, len: usize },
    Reshape(ValueId),
    Transpose(ValueId),
    Scale(ValueId, f32),
    SigmoidCrossEntropy { logit: ValueId, target: f32 },
    SumScalars(Vec<ValueId>),
}

impl Op {
    fn inputs(&self) -> impl Iterator<Item = ValueId> + '_ {
        let (fixed, list): ([Option<ValueId>; 3], &[ValueId]) = match self {
            Op::Leaf => ([None, None, None], &[]),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) => {
                ([Some(*a), Some(*b), None], &[])
            }
            Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols { x: a, .. }
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::GatherRow { table: a, .. }
            | Op::SigmoidCrossEntropy { logit: a, .. } => ([Some(*a), None, None], &[]),
            Op::LayerNormRows { x, gamma, beta } => {
                ([Some(*x), Some(*gamma), Some(*beta)], &[])
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) | Op::SumScalars(parts) => {
                ([None, None, None], parts.as_slice())
            }
        };
        fixed.into_iter().flatten().chain(list.iter().copied())
    }
}

struct Node<'m> {
    op: Op,
    value: Slot<'m>,
}

/// Record of one forward pass.
pub struct Tape<'m> {
    nodes: Vec<Node<'m>>,
    param_ids: HashMap<&'m str, ValueId>,
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_ids: HashMap::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value: Slot::Owned(value) });
        id
    }

    /// Registers a constant input.
    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Registers a named parameter leaf, deduplicated by name.
    pub fn param(&mut self, name: &'m str, tensor: &'m Tensor) -> ValueId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value: Slot::Param(tensor) });
        self.param_ids.insert(name, id);
        id
    }

    #[inline]
    pub fn value(&self, id: ValueId) -> &Tensor {
        self.nodes[id.0].value.tensor()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ops and values in tape order, for inspection in tests.
    pub fn iter_ops(&self) -> impl Iterator<Item = (&Op, &Tensor)> {
        self.nodes.iter().map(|n| (&n.op, n.value.tensor()))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = tensor::add(self.value(a), self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> ValueId {
        let v = tensor::add_bias(self.value(a), self.value(bias));
        self.push(Op::AddBias(a, bias), v)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = tensor::relu(self.value(a));
        self.push(Op::Relu(a), v)
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let v = tensor::softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm_rows(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> ValueId {
        let v = tensor::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta));
        self.push(Op::LayerNormRows { x, gamma, beta }, v)
    }

    pub fn gather_row(&mut self, table: ValueId, row: usize) -> ValueId {
        let t = self.value(table);
        assert!(
            row < t.rows(),
            "gather_row: row {row} out of bounds for table with {} rows",
            t.rows()
        );
        let v = Tensor::row(t.row_slice(row).to_vec());
        self.push(Op::GatherRow { table, row }, v)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&tensors);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> ValueId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_rows(&tensors);
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let v = tensor::slice_cols(self.value(x), start, len);
        self.push(Op::SliceCols { x, start, len }, v)
    }

    pub fn reshape(&mut self, x: ValueId, rows: usize, cols: usize) -> ValueId {
        let v = self.value(x).reshaped(rows, cols);
        self.push(Op::Reshape(x), v)
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let v = tensor::transpose(self.value(x));
        self.push(Op::Transpose(x), v)
    }

    pub fn scale(&mut self, x: ValueId, factor: f32) -> ValueId {
        let v = tensor::scale(self.value(x), factor);
        self.push(Op::Scale(x, factor), v)
    }

    pub fn sigmoid_cross_entropy(&mut self, logit: ValueId, target: f32) -> ValueId {
        let z = self.value(logit).item();
        let v = Tensor::scalar(tensor::sigmoid_cross_entropy(z, target));
        self.push(Op::SigmoidCrossEntropy { logit, target }, v)
    }

    pub fn sum_scalars(&mut self, parts: &[ValueId]) -> ValueId {
        let sum: f64 = parts.iter().map(|&p| f64::from(self.value(p).item())).sum();
        self.push(Op::SumScalars(parts.to_vec()), Tensor::scalar(sum as f32))
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per
    /// parameter in `wrt` that has a leaf on this tape; parameters whose
    /// leaf does not reach the loss get a zero gradient of matching shape.
    ///
    /// Gradients are never materialized for leaves outside `wrt` (frozen
    /// parameters, constant inputs), which skips the transposed matmuls a
    /// frozen backbone would otherwise pay for.
    pub fn grad(&self, loss: ValueId, wrt: &BTreeSet<String>) -> GradMap {
        assert_eq!(
            self.value(loss).shape(),
            [1, 1],
            "grad: loss must be a scalar tensor"
        );
        // A node's gradient is useful only if its input subtree contains a
        // parameter named in wrt; everything else (frozen backbones,
        // constant inputs, subgraphs feeding only frozen leaves) is pruned
        // from the backward pass.
        let mut wanted = vec![false; self.nodes.len()];
        for (name, &ValueId(leaf)) in &self.param_ids {
            wanted[leaf] = wrt.contains(*name);
        }
        for idx in 0..self.nodes.len() {
            if !wanted[idx] {
                wanted[idx] = self.nodes[idx].op.inputs().any(|v| wanted[v.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            self.backward_node(idx, &g, &mut grads, &wanted);
            if keep {
                grads[idx] = Some(g);
            }
        }

        let mut out = GradMap::new();
        for name in wrt {
            if let Some(&ValueId(leaf)) = self.param_ids.get(name.as_str()) {
                let g = grads[leaf]
                    .take()
                    .unwrap_or_else(|| {
                        let t = self.nodes[leaf].value.tensor();
                        Tensor::zeros(t.rows(), t.cols())
                    });
                out.insert(name.clone(), g);
            }
        }
        out
    }

    #[inline]
    fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>], wanted: &[bool]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wanted[a.0] {
                    let da = tensor::matmul_nt(g, self.value(*b));
                    Self::accumulate(grads, *a, da);
                }
                if wanted[b.0] {
                    let db = tensor::matmul_tn(self.value(*a), g);
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wanted[a.0] {
                    Self::accumulate(grads, *a, g.clone());
                }
                if wanted[b.0] {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::AddBias(a, bias) => {
                if wanted[a.0] {
                    Self::accumulate(grads, *a, g.clone());
                }
                if wanted[bias.0] {
                    Self::accumulate(grads, *bias, col_sums(g));
                }
            }
            Op::Relu(a) => {
                if wanted[a.0] {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *a, Tensor::new(x.rows(), x.cols(), data));
                }
            }
            Op::SoftmaxRows(a) => {
                if !wanted[a.0] {
                    return;
                }
                let s = self.nodes[idx].value.tensor();
                let (m, n) = (s.rows(), s.cols());
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    let srow = s.row_slice(r);
                    let grow = g.row_slice(r);
                    let dot: f64 = srow
                        .iter()
                        .zip(grow)
                        .map(|(&si, &gi)| f64::from(si) * f64::from(gi))
                        .sum();
                    for (si, gi) in srow.iter().zip(grow) {
                        data.push((f64::from(*si) * (f64::from(*gi) - dot)) as f32);
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(m, n, data));
            }
            Op::LayerNormRows { x, gamma, beta } => {
                if !wanted[x.0] && !wanted[gamma.0] && !wanted[beta.0] {
                    return;
                }
                let (dx, dgamma, dbeta) =
                    layer_norm_backward(self.value(*x), self.value(*gamma), g);
                if wanted[x.0] {
                    Self::accumulate(grads, *x, dx);
                }
                if wanted[gamma.0] {
                    Self::accumulate(grads, *gamma, dgamma);
                }
                if wanted[beta.0] {
                    Self::accumulate(grads, *beta, dbeta);
                }
            }
            Op::GatherRow { table, row } => {
                if !wanted[table.0] {
                    return;
                }
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.rows(), t.cols());
                let n = t.cols();
                dt.data_mut()[row * n..(row + 1) * n].copy_from_slice(g.data());
                Self::accumulate(grads, *table, dt);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wanted[p.0] {
                        Self::accumulate(grads, p, tensor::slice_cols(g, start, w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let t = self.value(p);
                    let rows = t.rows();
                    let n = t.cols();
                    if wanted[p.0] {
                        let dp = Tensor::new(
                            rows,
                            n,
                            g.data()[start * n..(start + rows) * n].to_vec(),
                        );
                        Self::accumulate(grads, p, dp);
                    }
                    start += rows;
                }
            }
            Op::SliceCols { x, start, len } => {
                if !wanted[x.0] {
                    return;
                }
                let xt = self.value(*x);
                let mut dx = Tensor::zeros(xt.rows(), xt.cols());
                let n = xt.cols();
                for r in 0..xt.rows() {
                    let src = g.row_slice(r);
                    dx.data_mut()[r * n + start..r * n + start + len].copy_from_slice(src);
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                if wanted[x.0] {
                    let t = self.value(*x);
                    Self::accumulate(grads, *x, g.reshaped(t.rows(), t.cols()));
                }
            }
            Op::Transpose(x) => {
                if wanted[x.0] {
                    Self::accumulate(grads, *x, tensor::transpose(g));
                }
            }
            Op::Scale(x, factor) => {
                if wanted[x.0] {
                    Self::accumulate(grads, *x, tensor::scale(g, *factor));
                }
            }
            Op::SigmoidCrossEntropy { logit, target } => {
                if wanted[logit.0] {
                    let z = f64::from(self.value(*logit).item());
                    let dz = (tensor::sigmoid(z) - f64::from(*target)) * f64::from(g.item());
                    Self::accumulate(grads, *logit, Tensor::scalar(dz as f32));
                }
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    if wanted[p.0] {
                        Self::accumulate(grads, p, g.clone());
                    }
                }
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (m, n) = (g.rows(), g.cols());
    let mut acc = vec![0.0f64; n];
    for r in 0..m {
        for (a, &v) in acc.iter_mut().zip(g.row_slice(r)) {
            *a += f64::from(v);
        }
    }
    Tensor::row(acc.into_iter().map(|v| v as f32).collect())
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (m, n) = (x.rows(), x.cols());
    let nf = n as f64;
    let mut dx = Vec::with_capacity(m * n);
    let mut dgamma = vec![0.0f64; n];
    let mut dbeta = vec![0.0f64; n];
    for r in 0..m {
        let row = x.row_slice(r);
        let grow = g.row_slice(r);
        let (mean, var) = tensor::row_mean_var(row);
        let inv = 1.0 / (var + tensor::LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (f64::from(v) - mean) * inv).collect();
        // h = gamma ∘ dy; dx = inv * (h - mean(h) - xhat * mean(h ∘ xhat))
        let h: Vec<f64> = grow
            .iter()
            .zip(gamma.data())
            .map(|(&gi, &ga)| f64::from(gi) * f64::from(ga))
            .collect();
        let h_mean: f64 = h.iter().sum::<f64>() / nf;
        let hx_mean: f64 = h.iter().zip(&xhat).map(|(&hi, &xi)| hi * xi).sum::<f64>() / nf;
        for j in 0..n {
            dx.push((inv * (h[j] - h_mean - xhat[j] * hx_mean)) as f32);
            dgamma[j] += f64::from(grow[j]) * xhat[j];
            dbeta[j] += f64::from(grow[j]);
        }
    }
    (
        Tensor::new(m, n, dx),
        Tensor::row(dgamma.into_iter().map(|v| v as f32).collect()),
        Tensor::row(dbeta.into_iter().map(|v| v as f32).collect()),
    )
}

/// Per-example gradients: `apply(i)` must build the forward pass for
/// example `i` alone and return the tape plus the scalar loss id. Entry
/// `i` of the result equals `grad` of that example's loss. Examples run
/// in parallel; ordering of the output is by example index.
pub fn per_example_grads<'m, F>(apply: F, batch_size: usize, wrt: &BTreeSet<String>) -> Vec<GradMap>
where
    F: Fn(usize) -> (Tape<'m>, ValueId) + Sync,
{
    per_example_grads_with_loss(apply, batch_size, wrt)
        .into_iter()
        .map(|(g, _)| g)
        .collect()
}

/// Like [`per_example_grads`] but also returns each example's loss value.
pub fn per_example_grads_with_loss<'m, F>(
    apply: F,
    batch_size: usize,
    wrt: &BTreeSet<String>,
) -> Vec<(GradMap, f32)>
where
    F: Fn(usize) -> (Tape<'m>, ValueId) + Sync,
{
    assert!(batch_size >= 1, "per_example_grads: empty batch");
    (0..batch_size)
        .into_par_iter()
        .map(|i| {
            let (tape, loss) = apply(i);
            let g = tape.grad(loss, wrt);
            (g, tape.value(loss).item())
        })
        .collect()
}
