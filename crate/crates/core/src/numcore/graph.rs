//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each op evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and hands
//! back a [`Var`] index. Because inputs always exist before the op that uses
//! them, the node list is already in topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Leaves can borrow their tensor (`leaf_ref`), so frozen model parameters
//! are never copied onto the tape. Nodes whose inputs never require a
//! gradient are skipped during the sweep; steering through a frozen model
//! therefore pays only for the path back to the latent.

use std::borrow::Cow;

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    Square(Var),
    Clamp(Var, f64, f64),
    Gelu(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PoolRows {
        inputs: Vec<Var>,
        rows: Vec<usize>,
        col_start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b)
            | AddRowBias(a, b) => vec![*a, *b],
            Scale(x, _) | Affine(x, _) | Square(x) | Clamp(x, _, _) | Gelu(x) | Sum(x)
            | WeightedSum(x, _) | Softmax(x) | Reshape(x) => vec![*x],
            SliceCols { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            GatherRows { table, .. } => vec![*table],
            PoolRows { inputs, .. } => inputs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single forward/backward tape.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    checked: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            checked: false,
        }
    }

    /// In checked mode every op fails with [`Error::NonFinite`] as soon as
    /// it produces a NaN or infinity.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), shaped
    /// like the node's value. `None` if the node is unreachable from the loss
    /// or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Scans every node for NaN/Inf.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite(format!("node {i} ({:?})", n.op)));
            }
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    // ---- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(self.shape_err("add_row_bias", x, bias));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    /// `a·x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let t = self.value(x).map(|v| a * v + b);
        self.push(t, Op::Affine(x, a))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ wᵢ xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: xv.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where entry `(i, j)` is forced to exactly zero for
    /// `j > i`.
    pub fn softmax_rows_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, Some(&RowMask::causal(0)))
    }

    /// Row-wise softmax restricted to the columns `mask` allows; the rest are
    /// exactly zero.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: &RowMask) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&RowMask>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let Some(m) = mask else {
                softmax_in_place(row);
                continue;
            };
            let (a, b) = m.live(i, c);
            if a.end == b.start {
                softmax_in_place(&mut row[..b.end]);
            } else {
                softmax_split(row, a.clone(), b.clone());
                row[a.end..b.start].iter_mut().for_each(|v| *v = 0.0);
            }
            row[b.end..].iter_mut().for_each(|v| *v = 0.0);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(self.shape_err("layernorm", x, gain));
        }
        let (g, b) = (gv.data(), bv.data());
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![xv.rows(), len], data)?;
        self.push(t, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: tv.shape().to_vec(),
                    right: vec![id],
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over every input and every listed row of the column window
    /// `[col_start, col_start + col_len)`. Output shape `[1, col_len]`.
    pub fn pool_rows(&mut self, inputs: &[Var], rows: &[usize], col_start: usize, col_len: usize) -> Result<Var> {
        if inputs.is_empty() || rows.is_empty() {
            return Err(Error::InvalidConfig("pool_rows over an empty selection".into()));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; col_len];
        for &v in inputs {
            let t = self.value(v);
            if t.shape() != shape.as_slice() || col_start + col_len > t.cols() {
                return Err(self.shape_err("pool_rows", inputs[0], v));
            }
            for &r in rows {
                if r >= t.rows() {
                    return Err(self.shape_err("pool_rows", inputs[0], v));
                }
                let row = &t.row(r)[col_start..col_start + col_len];
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / (inputs.len() * rows.len()) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(vec![1, col_len], out)?;
        self.push(
            t,
            Op::PoolRows {
                inputs: inputs.to_vec(),
                rows: rows.to_vec(),
                col_start,
            },
        )
    }

    /// Mean negative log-likelihood of `(row, class)` targets under a
    /// row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if targets.is_empty() {
            return Err(Error::InvalidConfig("cross_entropy without targets".into()));
        }
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut nll = 0.0;
        for &(r, cls) in targets {
            if r >= lv.rows() || cls >= c {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    left: lv.shape().to_vec(),
                    right: vec![r, cls],
                });
            }
            let mut p = lv.row(r).to_vec();
            softmax_in_place(&mut p);
            nll -= p[cls].max(f64::MIN_POSITIVE).ln();
            probs.extend_from_slice(&p);
        }
        let loss = nll / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate on every
    /// node that requires one; a second call without
    /// [`reset_grads`](Self::reset_grads) is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal attention over a shared prefix followed by independent segments.
///
/// Row `i` sees the prefix columns `[0, min(prefix, i + 1))` and its own
/// segment `[starts[i], i]`. With a single segment this is the plain causal
/// mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowMask {
    prefix: usize,
    /// Segment start per row past the prefix.
    starts: Vec<usize>,
}

impl RowMask {
    /// Plain causal mask: every row is in one segment starting at `prefix`.
    pub fn causal(prefix: usize) -> Self {
        Self {
            prefix,
            starts: Vec::new(),
        }
    }

    /// A prefix of `prefix` rows followed by segments of the given lengths.
    pub fn segments(prefix: usize, lens: &[usize]) -> Self {
        let mut starts = Vec::with_capacity(lens.iter().sum());
        let mut at = prefix;
        for &l in lens {
            starts.extend(std::iter::repeat_n(at, l));
            at += l;
        }
        Self { prefix, starts }
    }

    fn live(&self, i: usize, cols: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let end = (i + 1).min(cols);
        if i < self.prefix {
            return (0..end, end..end);
        }
        let start = self.starts.get(i - self.prefix).copied().unwrap_or(self.prefix).max(self.prefix);
        (0..self.prefix.min(end), start.min(end)..end)
    }
}

/// Softmax over the union of two ascending column ranges of `row`, summed
/// in column order.
fn softmax_split(row: &mut [f64], a: std::ops::Range<usize>, b: std::ops::Range<usize>) {
    let max = row[a.clone()].iter().chain(&row[b.clone()]).copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for j in a.clone().chain(b.clone()) {
        row[j] = (row[j] - max).exp();
        z += row[j];
    }
    for j in a.chain(b) {
        row[j] /= z;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::matmul_bt(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::matmul_at(av.data(), g, db, m, k, n);
            }
        }
        Op::MatMulBt(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::matmul(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::matmul_at(g, av.data(), db, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, *v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g / y;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for (((d, g), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                    *d -= g * x / (y * y);
                }
            }
        }
        Op::AddRowBias(x, b) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            let c = out.cols();
            if let Some(d) = slot(nodes, grads, *b) {
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Scale(x, c) | Op::Affine(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::Square(x) => {
            let xv = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * x * g;
                }
            }
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    if *x > *lo && *x < *hi {
                        *d += g;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g * gelu_grad(*x);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::WeightedSum(x, w) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(w).for_each(|(d, w)| *d += g[0] * w);
            }
        }
        Op::Softmax(x) => {
            let c = out.cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let s: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += y * (g - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = out.cols();
            let gv = val(*gain).data();
            if let Some(d) = slot(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((d, g), h) in d.iter_mut().zip(grow).zip(hrow) {
                        *d += g * h;
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                for grow in g.chunks(c) {
                    d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                let n = c as f64;
                let mut dh = vec![0.0; c];
                for (r, ((drow, grow), hrow)) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        dh[j] = grow[j] * gv[j];
                    }
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for j in 0..c {
                        drow[j] += inv / n * (n * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let c_in = val(*x).cols();
            let len = out.cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for (drow, grow) in d.chunks_mut(c_in).zip(g.chunks(len)) {
                    drow[*start..start + len].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let c = val(*p).cols();
                if let Some(d) = slot(nodes, grads, *p) {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(total)) {
                        drow.iter_mut().zip(&grow[offset..offset + c]).for_each(|(d, g)| *d += g);
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                if let Some(d) = slot(nodes, grads, *p) {
                    d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        Op::GatherRows { table, ids } => {
            let c = out.cols();
            if let Some(d) = slot(nodes, grads, *table) {
                for (&id, grow) in ids.iter().zip(g.chunks(c)) {
                    d[id * c..(id + 1) * c].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::PoolRows {
            inputs,
            rows,
            col_start,
        } => {
            let inv = 1.0 / (inputs.len() * rows.len()) as f64;
            let len = out.cols();
            for v in inputs {
                let c = val(*v).cols();
                if let Some(d) = slot(nodes, grads, *v) {
                    for &r in rows {
                        let base = r * c + col_start;
                        d[base..base + len].iter_mut().zip(g).for_each(|(d, g)| *d += g * inv);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = val(*logits).cols();
            let scale = g[0] / targets.len() as f64;
            if let Some(d) = slot(nodes, grads, *logits) {
                for (t, &(r, cls)) in targets.iter().enumerate() {
                    let p = &probs[t * c..(t + 1) * c];
                    let drow = &mut d[r * c..(r + 1) * c];
                    for j in 0..c {
                        let onehot = if j == cls { 1.0 } else { 0.0 };
                        drow[j] += scale * (p[j] - onehot);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }
}
