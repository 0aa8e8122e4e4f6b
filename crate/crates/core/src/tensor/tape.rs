use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    AddRow(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    ClampMin(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Ln(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every op of one forward pass so it can be replayed backwards.
///
/// A tape is single-threaded; build a fresh one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Var::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// require gradients.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim_err(op, a.shape, b.shape));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: [m, n],
        data: out,
    }
}

fn transpose_values(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: [n, m],
        data: out,
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a leaf. Gradients are only tracked for leaves created with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        // Nothing upstream needs a gradient: store as a constant and drop the
        // saved activations.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn with2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    fn with1<R>(&self, a: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with1(self.id, Tensor::clone)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        self.tape.with1(self.id, f)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.with1(self.id, |t| t.shape)
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check_tape(&self, other: &Var<'_>) {
        assert!(
            core::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let out = self.tape.with2(self.id, rhs.id, |a, b| {
            if a.cols() != b.rows() {
                return Err(dim_err("matmul", a.shape, b.shape));
            }
            Ok(matmul_values(a, b))
        })?;
        self.tape
            .record("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, transpose_values);
        self.tape
            .record("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let out = self.tape.with2(self.id, rhs.id, |a, b| {
            same_shape(name, a, b)?;
            Ok(zip_map(a, b, f))
        })?;
        self.tape.record(name, out, op, &[self.id, rhs.id])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |x, y| x / y, Op::Div(self.id, rhs.id))
    }

    pub fn minimum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "minimum", f64::min, Op::Minimum(self.id, rhs.id))
    }

    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "maximum", f64::max, Op::Maximum(self.id, rhs.id))
    }

    /// Adds a `1 × n` row vector to every row of an `m × n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&row);
        let out = self.tape.with2(self.id, row.id, |a, r| {
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(dim_err("add_row", a.shape, r.shape));
            }
            let n = a.cols();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + r.data[i % n])
                .collect();
            Ok(Tensor {
                shape: a.shape,
                data,
            })
        })?;
        self.tape
            .record("add_row", out, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| map(a, |x| x + s));
        self.tape
            .record("add_scalar", out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| map(a, |x| x * s));
        self.tape
            .record("mul_scalar", out, Op::MulScalar(self.id, s), &[self.id])
    }

    pub fn clamp_min(self, lo: f64) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| map(a, |x| x.max(lo)));
        self.tape
            .record("clamp_min", out, Op::ClampMin(self.id, lo), &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| map(a, |x| x.max(0.0)));
        self.tape.record("relu", out, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| {
            map(a, |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + libm::exp(-x))
                } else {
                    let e = libm::exp(x);
                    e / (1.0 + e)
                }
            })
        });
        self.tape.record("sigmoid", out, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn abs(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| map(a, f64::abs));
        self.tape.record("abs", out, Op::Abs(self.id), &[self.id])
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| map(a, libm::log));
        self.tape.record("ln", out, Op::Ln(self.id), &[self.id])
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| {
            let n = a.cols();
            let mut data = vec![0.0; a.len()];
            for (row, out) in a.data.chunks(n).zip(data.chunks_mut(n)) {
                softmax_row(row, out);
            }
            Tensor {
                shape: a.shape,
                data,
            }
        });
        self.tape
            .record("softmax_rows", out, Op::SoftmaxRows(self.id), &[self.id])
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| {
            let n = a.cols();
            let mut data = Vec::with_capacity(a.len());
            for row in a.data.chunks(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
                data.extend(row.iter().map(|&x| x - lse));
            }
            Tensor {
                shape: a.shape,
                data,
            }
        });
        self.tape
            .record("log_softmax_rows", out, Op::LogSoftmaxRows(self.id), &[self.id])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 × n` scale `gamma` and shift `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&gamma);
        self.check_tape(&beta);
        let (out, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
            );
            let n = x.cols();
            if g.shape != [1, n] || b.shape != [1, n] {
                return Err(dim_err("layer_norm", x.shape, g.shape));
            }
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(x.rows());
            for row in x.data.chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * g.data[j] + b.data[j]);
                }
            }
            (
                Tensor {
                    shape: x.shape,
                    data: out,
                },
                xhat,
                rstd,
            )
        };
        self.tape.record(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of zero tensors".into()))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| {
            first.check_tape(p);
            p.id
        }).collect();
        let out = {
            let nodes = tape.nodes.borrow();
            let cols = nodes[ids[0]].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for &i in &ids {
                let v = &nodes[i].value;
                if v.cols() != cols {
                    return Err(dim_err("concat_rows", nodes[ids[0]].value.shape, v.shape));
                }
                rows += v.rows();
                data.extend_from_slice(&v.data);
            }
            Tensor {
                shape: [rows, cols],
                data,
            }
        };
        tape.record("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of zero tensors".into()))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| {
            first.check_tape(p);
            p.id
        }).collect();
        let out = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[ids[0]].value.rows();
            let mut cols = 0;
            for &i in &ids {
                let v = &nodes[i].value;
                if v.rows() != rows {
                    return Err(dim_err("concat_cols", nodes[ids[0]].value.shape, v.shape));
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in &ids {
                    data.extend_from_slice(nodes[i].value.row_slice(r));
                }
            }
            Tensor {
                shape: [rows, cols],
                data,
            }
        };
        tape.record("concat_cols", out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| {
            if len == 0 || start + len > a.rows() {
                return Err(dim_err("slice_rows", a.shape, [start, len]));
            }
            let c = a.cols();
            Ok(Tensor {
                shape: [len, c],
                data: a.data[start * c..(start + len) * c].to_vec(),
            })
        })?;
        self.tape
            .record("slice_rows", out, Op::SliceRows(self.id, start), &[self.id])
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| {
            if len == 0 || start + len > a.cols() {
                return Err(dim_err("slice_cols", a.shape, [start, len]));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[start..start + len]);
            }
            Ok(Tensor {
                shape: [a.rows(), len],
                data,
            })
        })?;
        self.tape
            .record("slice_cols", out, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.with1(self.id, |a| {
            if index.is_empty() || index.iter().any(|&i| i >= a.rows()) {
                return Err(dim_err("gather_rows", a.shape, [index.len(), 0]));
            }
            let mut data = Vec::with_capacity(index.len() * a.cols());
            for &i in index {
                data.extend_from_slice(a.row_slice(i));
            }
            Ok(Tensor {
                shape: [index.len(), a.cols()],
                data,
            })
        })?;
        self.tape.record(
            "gather_rows",
            out,
            Op::GatherRows(self.id, index.to_vec()),
            &[self.id],
        )
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let out = self
            .tape
            .with1(self.id, |a| Tensor::scalar(a.data.iter().sum()));
        self.tape.record("sum", out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.with_value(Tensor::len) as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every node that requires gradients receives one; nodes unreachable from
    /// the loss receive zeros.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[self.id].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| Tensor {
                    shape: node.value.shape,
                    data: g.unwrap_or_else(|| vec![0.0; node.value.len()]),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let g = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            accumulate_with(grads, nodes, a, |ga| {
                // dA = dC · Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate_with(grads, nodes, b, |gb| {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = av.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * x;
                        }
                    }
                }
            });
        }
        &Op::Transpose(a) => {
            let gt = Tensor {
                shape: y.shape,
                data: g.to_vec(),
            };
            accumulate(grads, nodes, a, transpose_values(&gt).data);
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|x| -x).collect());
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value.data, &nodes[b].value.data);
            accumulate(grads, nodes, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        &Op::Div(a, b) => {
            let (av, bv) = (&nodes[a].value.data, &nodes[b].value.data);
            accumulate(grads, nodes, a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
            accumulate(
                grads,
                nodes,
                b,
                g.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            );
        }
        &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
            let pick_a = matches!(node.op, Op::Minimum(..));
            let (av, bv) = (&nodes[a].value.data, &nodes[b].value.data);
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                // ties route to the left operand
                let left = if pick_a { av[i] <= bv[i] } else { av[i] >= bv[i] };
                if left {
                    ga[i] = g[i];
                } else {
                    gb[i] = g[i];
                }
            }
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        &Op::AddRow(a, r) => {
            accumulate(grads, nodes, a, g.to_vec());
            let n = y.cols();
            accumulate_with(grads, nodes, r, |gr| {
                for row in g.chunks(n) {
                    for (o, x) in gr.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            });
        }
        &Op::AddScalar(a) => accumulate(grads, nodes, a, g.to_vec()),
        &Op::MulScalar(a, s) => accumulate(grads, nodes, a, g.iter().map(|x| x * s).collect()),
        &Op::ClampMin(a, lo) => {
            let av = &nodes[a].value.data;
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(av).map(|(g, &x)| if x > lo { *g } else { 0.0 }).collect(),
            );
        }
        &Op::Relu(a) => {
            let av = &nodes[a].value.data;
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            );
        }
        &Op::Sigmoid(a) => {
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect(),
            );
        }
        &Op::Abs(a) => {
            let av = &nodes[a].value.data;
            accumulate(
                grads,
                nodes,
                a,
                g.iter()
                    .zip(av)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            );
        }
        &Op::Ln(a) => {
            let av = &nodes[a].value.data;
            accumulate(grads, nodes, a, g.iter().zip(av).map(|(g, x)| g / x).collect());
        }
        &Op::SoftmaxRows(a) => {
            let n = y.cols();
            let mut dx = Vec::with_capacity(g.len());
            for (yr, gr) in y.data.chunks(n).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            accumulate(grads, nodes, a, dx);
        }
        &Op::LogSoftmaxRows(a) => {
            let n = y.cols();
            let mut dx = Vec::with_capacity(g.len());
            for (yr, gr) in y.data.chunks(n).zip(g.chunks(n)) {
                let gsum: f64 = gr.iter().sum();
                dx.extend(yr.iter().zip(gr).map(|(ly, g)| g - libm::exp(*ly) * gsum));
            }
            accumulate(grads, nodes, a, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = y.cols();
            let gv = &nodes[*gamma].value.data;
            accumulate_with(grads, nodes, *gamma, |gg| {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            });
            accumulate_with(grads, nodes, *beta, |gb| {
                for gr in g.chunks(n) {
                    for j in 0..n {
                        gb[j] += gr[j];
                    }
                }
            });
            let mut dx = Vec::with_capacity(g.len());
            for ((gr, hr), &r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                let mean_dh = dh.iter().sum::<f64>() / n as f64;
                let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                dx.extend(
                    dh.iter()
                        .zip(hr)
                        .map(|(d, h)| r * (d - mean_dh - h * mean_dh_h)),
                );
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let len = nodes[i].value.len();
                accumulate(grads, nodes, i, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::ConcatCols(ids) => {
            let rows = y.rows();
            let total = y.cols();
            let mut offset = 0;
            for &i in ids {
                let c = nodes[i].value.cols();
                let mut part = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    part.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                }
                accumulate(grads, nodes, i, part);
                offset += c;
            }
        }
        &Op::SliceRows(a, start) => {
            let c = y.cols();
            accumulate_with(grads, nodes, a, |ga| {
                for (o, x) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *o += x;
                }
            });
        }
        &Op::SliceCols(a, start) => {
            let (rows, len) = (y.rows(), y.cols());
            let total = nodes[a].value.cols();
            accumulate_with(grads, nodes, a, |ga| {
                for r in 0..rows {
                    for j in 0..len {
                        ga[r * total + start + j] += g[r * len + j];
                    }
                }
            });
        }
        Op::GatherRows(a, index) => {
            let c = y.cols();
            accumulate_with(grads, nodes, *a, |ga| {
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
            });
        }
        &Op::Sum(a) => {
            let len = nodes[a].value.len();
            accumulate(grads, nodes, a, vec![g[0]; len]);
        }
    }
}
