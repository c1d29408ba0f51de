//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node whose inputs are earlier nodes, so the record is topological by
//! construction and a single reverse sweep produces all gradients. Parameters
//! are borrowed from a [`ParameterStore`] rather than copied.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{GroupSet, ParamId, ParameterStore};
use crate::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The forward kinds, for generic dispatch through [`Tape::apply`].
///
/// Arity and shape rules:
/// - `MatMul`: `[m,k] x [k,n] -> [m,n]`
/// - `Add`, `Sub`: equal shapes, or either side a single element (broadcast)
/// - `AddRow`: `[r,c] + [c] -> [r,c]` (bias broadcast over rows)
/// - `Scale(c)`, `Relu`, `Tanh`, `Abs`, `Square`: unary, shape preserving
/// - `Mul`: equal shapes, elementwise
/// - `Softmax`, `LogSoftmax`: over the last axis
/// - `LayerNorm`: `x [r,c]`, `gain [c]`, `bias [c]`, over the last axis
/// - `Conv1d`: `x [T,cin]`, `w [k*cin, cout]`, `b [cout]`, odd `k`, zero "same" padding over `T`
/// - `Conv2d`: `x [H,W]` single channel, `w [k*k, c]`, `b [c]` -> `[H*W, c]`, zero "same" padding
/// - `Concat`: matrices with equal rows, joined along the last axis
/// - `SliceCols`, `SliceRows`: a contiguous range of columns or rows
/// - `Transpose`: `[r,c] -> [c,r]`
/// - `Mean`, `Sum`: any shape to `[1]`
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    AddRow,
    Scale(f64),
    Mul,
    Relu,
    Tanh,
    Abs,
    Square,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Conv1d,
    Conv2d,
    Concat,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    Transpose,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, kernel: usize },
    Conv2d { x: Var, w: Var, b: Var, kernel: usize },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Mean(Var),
    Sum(Var),
    /// Scalar output whose partial derivatives were computed during the forward pass.
    ScalarFn { inputs: Vec<Var>, partials: Vec<Tensor> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<(usize, usize), Var>,
    bound: Vec<(ParamId, Var)>,
    grad_groups: GroupSet,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape on which bound parameters do not take gradients.
    pub fn new() -> Self {
        Self::with_param_grads(GroupSet::EMPTY)
    }

    /// A tape on which parameters of `groups` take gradients.
    pub fn with_param_grads(groups: GroupSet) -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), bound: Vec::new(), grad_groups: groups }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Binds a stored parameter, once per tape.
    pub fn param(&mut self, store: &'p ParameterStore, id: ParamId) -> Var {
        let key = (store as *const ParameterStore as usize, id.index());
        if let Some(&v) = self.param_vars.get(&key) {
            return v;
        }
        let p = store.param(id);
        let requires_grad = self.grad_groups.contains(p.group);
        self.nodes.push(Node { value: Cow::Borrowed(&p.value), op: Op::Leaf, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(key, v);
        if requires_grad {
            self.bound.push((id, v));
        }
        v
    }

    pub fn param_named(&mut self, store: &'p ParameterStore, name: &str) -> Result<Var> {
        let id = store.require(name)?;
        Ok(self.param(store, id))
    }

    /// Generic entry point over [`OpKind`].
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::invalid(format!("{kind:?} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::AddRow => arity(2).and_then(|_| self.add_row(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], *c)),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Abs => arity(1).and_then(|_| self.abs(inputs[0])),
            OpKind::Square => arity(1).and_then(|_| self.square(inputs[0])),
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::LogSoftmax => arity(1).and_then(|_| self.log_softmax(inputs[0])),
            OpKind::LayerNorm => arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2])),
            OpKind::Conv1d => arity(3).and_then(|_| self.conv1d(inputs[0], inputs[1], inputs[2])),
            OpKind::Conv2d => arity(3).and_then(|_| self.conv2d(inputs[0], inputs[1], inputs[2])),
            OpKind::Concat => self.concat(inputs),
            OpKind::SliceCols { start, len } => arity(1).and_then(|_| self.slice_cols(inputs[0], *start, *len)),
            OpKind::SliceRows { start, len } => arity(1).and_then(|_| self.slice_rows(inputs[0], *start, *len)),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg, "transpose")
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, sign: f64, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + sign * y).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| x + sign * y)
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| x + sign * y)
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let rg = self.any_grad(&[a, b]);
        let op = if sign > 0.0 { Op::Add(a, b) } else { Op::Sub(a, b) };
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, 1.0, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, -1.0, "sub")
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let tb = self.value(bias);
        if tb.numel() != c {
            return Err(Error::shape("add_row", format!("[{r},{c}] + {:?}", tb.shape())));
        }
        let b = tb.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, bias]);
        self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| c * v);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg, "scale")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x), "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x), "square")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogSoftmax(x), rg, "log_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("[{r},{c}] with gain {:?} bias {:?}", self.value(gain).shape(), self.value(bias).shape()),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if wr % cin != 0 || (wr / cin) % 2 == 0 || self.value(b).numel() != cout {
            return Err(Error::shape(
                "conv1d",
                format!("x [{t},{cin}], w [{wr},{cout}], b {:?}", self.value(b).shape()),
            ));
        }
        let kernel = wr / cin;
        let cols = im2col_1d(self.value(x).data(), t, cin, kernel);
        let mut out = vec![0.0; t * cout];
        matmul_nn_acc(&cols, self.value(w).data(), &mut out, t, wr, cout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(Tensor::from_parts(vec![t, cout], out), Op::Conv1d { x, w, b, kernel }, rg, "conv1d")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd) = self.dims(x);
        let (kk, ch) = self.dims(w);
        let kernel = (kk as f64).sqrt().round() as usize;
        if kernel * kernel != kk || kernel.is_multiple_of(2) || self.value(b).numel() != ch {
            return Err(Error::shape(
                "conv2d",
                format!("x [{h},{wd}], w [{kk},{ch}], b {:?}", self.value(b).shape()),
            ));
        }
        let cols = im2col_2d(self.value(x).data(), h, wd, kernel);
        let mut out = vec![0.0; h * wd * ch];
        matmul_nn_acc(&cols, self.value(w).data(), &mut out, h * wd, kk, ch);
        let bias = self.value(b).data();
        for row in out.chunks_mut(ch) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(Tensor::from_parts(vec![h * wd, ch], out), Op::Conv2d { x, w, b, kernel }, rg, "conv2d")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of nothing"));
        };
        let r = self.dims(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(Error::shape("concat", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::from_parts(vec![r, total], out), Op::Concat(parts.to_vec()), rg, "concat")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice", format!("columns {start}..{} of [{r},{c}]", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, rg, "slice")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SliceRows { x, start }, rg, "slice")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, partials: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::invalid("scalar_fn needs one partial per input"));
        }
        for (&v, p) in inputs.iter().zip(&partials) {
            if self.value(v).shape() != p.shape() {
                return Err(Error::shape(
                    "scalar_fn",
                    format!("partial {:?} for input {:?}", p.shape(), self.value(v).shape()),
                ));
            }
        }
        let rg = self.any_grad(inputs);
        self.push(Tensor::scalar(value), Op::ScalarFn { inputs: inputs.to_vec(), partials }, rg, "scalar_fn")
    }

    /// One reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|&(id, v)| (id, v)).collect();
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |da| matmul_nt_acc(g, tb.data(), da, m, n, k));
                acc(*b, &mut |db| matmul_tn_acc(ta.data(), g, db, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(*x, &mut |dx| {
                    for ii in 0..r {
                        for j in 0..c {
                            dx[ii * c + j] += g[j * r + ii];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Add(..)) { 1.0 } else { -1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let reduced = nodes[v.0].value.numel() == 1 && out.numel() != 1;
                    acc(v, &mut |dv| {
                        if reduced {
                            dv[0] += s * g.iter().sum::<f64>();
                        } else {
                            for (d, gv) in dv.iter_mut().zip(g) {
                                *d += s * gv;
                            }
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                let c = out.cols();
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(tb) {
                        *d += gv * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(ta) {
                        *d += gv * x;
                    }
                });
            }
            Op::Relu(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let ys = out.data();
                acc(*x, &mut |dx| {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(ys) {
                        *d += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Abs(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *d += gv;
                        } else if *xv < 0.0 {
                            *d -= gv;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        *d += 2.0 * xv * gv;
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let ys = out.data();
                acc(*x, &mut |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(ys.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let ys = out.data();
                acc(*x, &mut |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(ys.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - y.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let gn = nodes[gain.0].value.data();
                acc(*gain, &mut |dg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gv), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in g.chunks(c) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    for (row, ((drow, grow), hrow)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gn[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let dh = grow[j] * gn[j];
                            drow[j] += rstd[row] * (dh - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, kernel } => {
                let (t, cin) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let cout = out.cols();
                let kc = kernel * cin;
                if nodes[w.0].requires_grad {
                    let cols = im2col_1d(nodes[x.0].value.data(), t, cin, *kernel);
                    acc(*w, &mut |dw| matmul_tn_acc(&cols, g, dw, t, kc, cout));
                }
                acc(*b, &mut |db| {
                    for row in g.chunks(cout) {
                        add_into(db, row);
                    }
                });
                let wd = nodes[w.0].value.data();
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; t * kc];
                    matmul_nt_acc(g, wd, &mut dcols, t, cout, kc);
                    col2im_1d(&dcols, dx, t, cin, *kernel);
                });
            }
            Op::Conv2d { x, w, b, kernel } => {
                let (h, wdth) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let ch = out.cols();
                let kk = kernel * kernel;
                if nodes[w.0].requires_grad {
                    let cols = im2col_2d(nodes[x.0].value.data(), h, wdth, *kernel);
                    acc(*w, &mut |dw| matmul_tn_acc(&cols, g, dw, h * wdth, kk, ch));
                }
                acc(*b, &mut |db| {
                    for row in g.chunks(ch) {
                        add_into(db, row);
                    }
                });
                let wd = nodes[w.0].value.data();
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; h * wdth * kk];
                    matmul_nt_acc(g, wd, &mut dcols, h * wdth, ch, kk);
                    col2im_2d(&dcols, dx, h, wdth, *kernel);
                });
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(p, &mut |dp| {
                        for (drow, grow) in dp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.cols();
                let len = out.cols();
                acc(*x, &mut |dx| {
                    for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |dx| add_into(&mut dx[start * c..start * c + g.len()], g));
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::ScalarFn { inputs, partials } => {
                for (&v, p) in inputs.iter().zip(partials) {
                    acc(v, &mut |dv| {
                        for (d, pv) in dv.iter_mut().zip(p.data()) {
                            *d += g[0] * pv;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col_1d(x: &[f64], t: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let kc = kernel * cin;
    let mut cols = vec![0.0; t * kc];
    for step in 0..t {
        for k in 0..kernel {
            let src = step + k;
            if src < half || src - half >= t {
                continue;
            }
            let src = src - half;
            cols[step * kc + k * cin..step * kc + (k + 1) * cin].copy_from_slice(&x[src * cin..(src + 1) * cin]);
        }
    }
    cols
}

fn col2im_1d(dcols: &[f64], dx: &mut [f64], t: usize, cin: usize, kernel: usize) {
    let half = kernel / 2;
    let kc = kernel * cin;
    for step in 0..t {
        for k in 0..kernel {
            let src = step + k;
            if src < half || src - half >= t {
                continue;
            }
            let src = src - half;
            add_into(&mut dx[src * cin..(src + 1) * cin], &dcols[step * kc + k * cin..step * kc + (k + 1) * cin]);
        }
    }
}

fn im2col_2d(x: &[f64], h: usize, w: usize, kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let kk = kernel * kernel;
    let mut cols = vec![0.0; h * w * kk];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * kk;
            for di in 0..kernel {
                let si = i + di;
                if si < half || si - half >= h {
                    continue;
                }
                for dj in 0..kernel {
                    let sj = j + dj;
                    if sj < half || sj - half >= w {
                        continue;
                    }
                    cols[base + di * kernel + dj] = x[(si - half) * w + sj - half];
                }
            }
        }
    }
    cols
}

fn col2im_2d(dcols: &[f64], dx: &mut [f64], h: usize, w: usize, kernel: usize) {
    let half = kernel / 2;
    let kk = kernel * kernel;
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * kk;
            for di in 0..kernel {
                let si = i + di;
                if si < half || si - half >= h {
                    continue;
                }
                for dj in 0..kernel {
                    let sj = j + dj;
                    if sj < half || sj - half >= w {
                        continue;
                    }
                    dx[(si - half) * w + sj - half] += dcols[base + di * kernel + dj];
                }
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter bound with gradients enabled, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|&(_, v)| self.wrt(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_shape_contract() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        let err = tape.matmul(b, b).unwrap_err();
        assert!(err.to_string().contains("[3,4] x [3,4]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0, 3.0]])).unwrap();
        let g = tape.constant(Tensor::filled(&[3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        // (x - 2) / sqrt(2/3), up to the variance epsilon
        let want = [-1.2247, 0.0, 1.2247];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-4, "{v} vs {w}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 3], 0.7), true).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x), Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[3], 2.0), true).unwrap();
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let big = tape.constant(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(tape.square(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut store = ParameterStore::new();
        let used = store.register("used", Group::Decoder, Tensor::filled(&[2], 1.0)).unwrap();
        let unused = store.register("unused", Group::Decoder, Tensor::filled(&[2], 1.0)).unwrap();
        let mut tape = Tape::with_param_grads(GroupSet::ALL);
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let loss = tape.sum(u).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(used).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.param(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_groups_bind_without_gradients() {
        let mut store = ParameterStore::new();
        let id = store.register("enc.w", Group::Encoder, Tensor::filled(&[2], 1.0)).unwrap();
        let mut tape = Tape::with_param_grads(GroupSet::of(&[Group::Decoder]));
        let v = tape.param(&store, id);
        assert!(!tape.requires_grad(v));
        let loss = tape.sum(v).unwrap();
        assert_eq!(tape.backward(loss).unwrap().params().count(), 0);
    }
}
