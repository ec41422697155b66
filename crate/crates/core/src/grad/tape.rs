use std::collections::HashMap;

use super::tensor::{matmul_at_kernel, matmul_bt_kernel, matmul_kernel, transpose_kernel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Guard used by layer-norm and cosine-similarity denominators.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Mean,
    Sum,
    Concat,
    Gather,
    Reshape,
    Norm,
    Cosine,
    Stack,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Concat(Vec<Var>),
    Gather { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Norm(Var),
    Cosine(Var, Var),
    Stack(Vec<Var>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Concat(..) => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Norm(..) => OpKind::Norm,
            Op::Cosine(..) => OpKind::Cosine,
            Op::Stack(..) => OpKind::Stack,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Append-only record of a computation, differentiated by [`Tape::backward`].
///
/// Nodes only ever reference earlier nodes, so insertion order is a
/// topological order. A tape is meant to be built, differentiated once and
/// dropped.
#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true, is_param: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, is_param: false });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn record(&mut self, op: Op<T>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(op.kind())));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, is_param: false });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra ----

    /// `a · b` with `a` of shape `[n, k]` or `[k]` and `b` of shape `[k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa.len() > 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (n, k) = self.value(a).dims2();
        let m = sb[1];
        let out_shape = if sa.len() == 1 { vec![m] } else { vec![n, m] };
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.record(Op::MatMul(a, b), &[a, b], Tensor::from_parts(out_shape, data))
    }

    /// `a · bᵀ` with `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_bt", &[sa, sb]));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let data = matmul_bt_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.record(Op::MatMulBt(a, b), &[a, b], Tensor::from_parts(vec![n, m], data))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", &[sa]));
        }
        let (r, c) = (sa[0], sa[1]);
        let data = transpose_kernel(self.value(a).data(), r, c);
        self.record(Op::Transpose(a), &[a], Tensor::from_parts(vec![c, r], data))
    }

    // ---- element-wise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        self.record(op, &[a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.is_empty() || sr.len() != 1 || sr[0] != *sx.last().unwrap() {
            return Err(shape_err(op, &[sx, sr]));
        }
        Ok(())
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast_check("add_row", x, row)?;
        let xv = self.value(x);
        let rv = self.value(row).data();
        let c = rv.len();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + rv[i % c]).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.record(Op::AddRow(x, row), &[x, row], value)
    }

    /// Multiplies every row of `x` element-wise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast_check("mul_row", x, row)?;
        let xv = self.value(x);
        let rv = self.value(row).data();
        let c = rv.len();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * rv[i % c]).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.record(Op::MulRow(x, row), &[x, row], value)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.record(Op::Scale(x, s), &[x], value)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + s);
        self.record(Op::AddScalar(x), &[x], value)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.record(Op::Exp(x), &[x], value)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        self.record(Op::Log(x), &[x], value)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.sqrt());
        self.record(Op::Sqrt(x), &[x], value)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.record(Op::Tanh(x), &[x], value)
    }

    // ---- normalizations ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(shape_err("softmax", &[xv.shape()]));
        }
        let value = softmax_rows(xv);
        self.record(Op::Softmax(x), &[x], value)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(shape_err("log_softmax", &[xv.shape()]));
        }
        let (r, c) = xv.dims2();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.record(Op::LogSoftmax(x), &[x], value)
    }

    /// Layer normalization over the last axis with affine scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.row_broadcast_check("layer_norm", x, gamma)?;
        self.row_broadcast_check("layer_norm", x, beta)?;
        let eps = T::of(NORM_EPS);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (r, c) = xv.dims2();
        let cf = T::of_usize(c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.record(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta], value)
    }

    // ---- reductions ----

    /// Mean over `axis`. A vector reduces to a scalar; a matrix reduces over
    /// rows (`axis = 0`, giving a column vector of means) or columns (`axis = 1`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let value = match (xv.rank(), axis) {
            (1, 0) => Tensor::scalar(xv.sum() / T::of_usize(xv.len())),
            (2, 0) => {
                let (r, c) = xv.dims2();
                let mut acc = vec![T::zero(); c];
                for i in 0..r {
                    for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                        *a += v;
                    }
                }
                let rf = T::of_usize(r);
                Tensor::from_parts(vec![c], acc.into_iter().map(|a| a / rf).collect())
            }
            (2, 1) => {
                let (r, c) = xv.dims2();
                let cf = T::of_usize(c);
                Tensor::from_parts(vec![r], (0..r).map(|i| xv.row(i).iter().copied().sum::<T>() / cf).collect())
            }
            _ => return Err(Error::Shape { op: "mean", shapes: vec![xv.shape().to_vec(), vec![axis]] }),
        };
        self.record(Op::Mean { x, axis }, &[x], value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(Op::Sum(x), &[x], value)
    }

    /// Euclidean norm of all entries.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        self.record(Op::Norm(x), &[x], Tensor::scalar(n))
    }

    /// Cosine similarity of two equally shaped tensors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let eps = T::of(NORM_EPS);
        let dot: T = av.iter().zip(bv).map(|(&x, &y)| x * y).sum();
        let na = av.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        let nb = bv.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        self.record(Op::Cosine(a, b), &[a, b], Tensor::scalar(dot / (na * nb)))
    }

    // ---- token-axis structure ----

    /// Concatenates matrices with equal column counts along the token axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid_shapes("concat", vec![]));
        }
        let cols = *self.shape(parts[0]).last().unwrap_or(&0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                let shapes = parts.iter().map(|&q| self.shape(q).to_vec()).collect();
                return Err(invalid_shapes("concat", shapes));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.record(Op::Concat(parts.to_vec()), parts, Tensor::from_parts(vec![rows, cols], data))
    }

    /// Rows `indices` of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape { op: "gather_rows", shapes: vec![s, indices.to_vec()] });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), s[1]], data);
        self.record(Op::Gather { x, rows: indices.to_vec() }, &[x], value)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.gather_rows(x, &[i])?;
        let c = self.shape(r)[1];
        self.reshape(r, &[c])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.record(Op::Reshape(x), &[x], value)
    }

    /// Stacks equal-length vectors into a matrix, one vector per row.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(invalid_shapes("stack", vec![]));
        }
        let len = self.value(rows[0]).len();
        if rows.iter().any(|&r| self.shape(r).len() > 1 || self.value(r).len() != len) {
            let shapes = rows.iter().map(|&q| self.shape(q).to_vec()).collect();
            return Err(invalid_shapes("stack", shapes));
        }
        let mut data = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            data.extend_from_slice(self.value(r).data());
        }
        self.record(Op::Stack(rows.to_vec()), rows, Tensor::from_parts(vec![rows.len(), len], data))
    }

    // ---- backward ----

    /// Reverse-mode gradient of a scalar `loss` with respect to every parameter.
    ///
    /// Parameters that `loss` does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(Var(i), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2();
                let m = val(*b).shape()[1];
                if wants(*a) {
                    let da = matmul_bt_kernel(g.data(), val(*b).data(), n, m, k);
                    acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), da));
                }
                if wants(*b) {
                    let db = matmul_at_kernel(val(*a).data(), g.data(), n, k, m);
                    acc(*b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = val(*a).dims2();
                let m = val(*b).shape()[0];
                if wants(*a) {
                    acc(*a, Tensor::from_parts(vec![n, k], matmul_kernel(g.data(), val(*b).data(), n, m, k)));
                }
                if wants(*b) {
                    acc(*b, Tensor::from_parts(vec![m, k], matmul_at_kernel(g.data(), val(*a).data(), n, m, k)));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2();
                acc(*a, Tensor::from_parts(vec![r, c], transpose_kernel(g.data(), c, r)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    acc(*a, g.zip_map(bv, |gv, b| gv / b));
                }
                if wants(*b) {
                    // d(a/b)/db = -y/b
                    let t = g.zip_map(y, |gv, yv| gv * yv).zip_map(bv, |t, b| -t / b);
                    acc(*b, t);
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if wants(*row) {
                    acc(*row, column_sums(g, val(*row).len()));
                }
            }
            Op::MulRow(x, row) => {
                let rv = val(*row).data();
                let c = rv.len();
                if wants(*x) {
                    let data = g.data().iter().enumerate().map(|(i, &gv)| gv * rv[i % c]).collect();
                    acc(*x, Tensor::from_parts(g.shape().to_vec(), data));
                }
                if wants(*row) {
                    let prod = g.zip_map(val(*x), |gv, xv| gv * xv);
                    acc(*row, column_sums(&prod, c));
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(x) => acc(*x, g.zip_map(val(*x), |gv, xv| gv / xv)),
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                acc(*x, g.zip_map(y, |gv, yv| if yv > T::zero() { gv / (two * yv) } else { T::zero() }));
            }
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::Softmax(x) => {
                let (r, c) = y.dims2();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::LogSoftmax(x) => {
                let (r, c) = y.dims2();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let total: T = gr.iter().copied().sum();
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * total));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = y.dims2();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (i, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        dg[i % c] += gv * h;
                    }
                    acc(*gamma, Tensor::from_parts(vec![c], dg));
                }
                if wants(*beta) {
                    acc(*beta, column_sums(g, c));
                }
                if wants(*x) {
                    let cf = T::of_usize(c);
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&gv, &gm)| gv * gm).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[i] / cf;
                        dx.extend(dh.iter().zip(hr).map(|(&d, &h)| k * (cf * d - s1 - h * s2)));
                    }
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
            }
            Op::Mean { x, axis } => {
                let xv = val(*x);
                let t = match (xv.rank(), *axis) {
                    (1, _) => Tensor::full(xv.shape(), g.item() / T::of_usize(xv.len())),
                    (_, 0) => {
                        let (r, c) = xv.dims2();
                        let rf = T::of_usize(r);
                        Tensor::from_fn(xv.shape(), |i| g.data()[i % c] / rf)
                    }
                    _ => {
                        let (_, c) = xv.dims2();
                        let cf = T::of_usize(c);
                        Tensor::from_fn(xv.shape(), |i| g.data()[i / c] / cf)
                    }
                };
                acc(*x, t);
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        acc(p, Tensor::from_parts(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Gather { x, rows } => {
                let xv = val(*x);
                let (_, c) = xv.dims2();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &i) in rows.iter().enumerate() {
                    let src = g.row(k);
                    for (d, &s) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec())),
            Op::Norm(x) => {
                let n = y.item();
                let gv = g.item();
                if n > T::zero() {
                    acc(*x, val(*x).map(|v| gv * v / n));
                } else {
                    acc(*x, Tensor::zeros(val(*x).shape()));
                }
            }
            Op::Cosine(a, b) => {
                let eps = T::of(NORM_EPS);
                let (av, bv) = (val(*a), val(*b));
                let c = y.item();
                let gv = g.item();
                let ra = av.data().iter().map(|&v| v * v).sum::<T>().sqrt();
                let rb = bv.data().iter().map(|&v| v * v).sum::<T>().sqrt();
                let den = ra.max(eps) * rb.max(eps);
                let grad_of = |own: &Tensor<T>, other: &Tensor<T>, r: T| {
                    let self_term = if r > eps { c / (r * r) } else { T::zero() };
                    own.zip_map(other, |o, p| gv * (p / den - self_term * o))
                };
                if wants(*a) {
                    acc(*a, grad_of(av, bv, ra));
                }
                if wants(*b) {
                    acc(*b, grad_of(bv, av, rb));
                }
            }
        }
    }
}

fn invalid_shapes(op: &'static str, shapes: Vec<Vec<usize>>) -> Error {
    Error::Shape { op, shapes }
}

fn column_sums<T: Scalar>(g: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % c] += v;
    }
    Tensor::from_parts(vec![c], out)
}

/// Row-wise softmax of a tensor (outside any tape).
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = x.dims2();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = data.len();
        data.extend(row.iter().map(|&v| (v - mx).exp()));
        let z: T = data[start..].iter().copied().sum();
        for v in &mut data[start..] {
            *v /= z;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::MatMulBt => "matmul_bt",
        OpKind::Transpose => "transpose",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::AddRow => "add_row",
        OpKind::MulRow => "mul_row",
        OpKind::Scale => "scale",
        OpKind::AddScalar => "add_scalar",
        OpKind::Exp => "exp",
        OpKind::Log => "log",
        OpKind::Sqrt => "sqrt",
        OpKind::Tanh => "tanh",
        OpKind::Softmax => "softmax",
        OpKind::LogSoftmax => "log_softmax",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Mean => "mean",
        OpKind::Sum => "sum",
        OpKind::Concat => "concat",
        OpKind::Gather => "gather_rows",
        OpKind::Reshape => "reshape",
        OpKind::Norm => "norm",
        OpKind::Cosine => "cosine",
        OpKind::Stack => "stack",
    }
}

/// Gradients of a scalar loss, keyed by parameter handle.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter. Panics if `v` is not a parameter of the tape.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        &self.grads[&v]
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[3.0; 4]));
        let g = tape.constant(t(&[4], &[1.0; 4]));
        let b = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(4.0));
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 4.0);
        assert_eq!(g.wrt(y).item(), 3.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient_at_symmetric_logits() {
        let mut tape = Tape::new();
        let logits = tape.param(t(&[2], &[0.0, 0.0]));
        let target = tape.constant(t(&[2], &[1.0, 0.0]));
        let lp = tape.log_softmax(logits).unwrap();
        let prod = tape.mul(lp, target).unwrap();
        let s = tape.sum(prod).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let d = g.wrt(logits).data();
        assert!((d[0] + 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let unused = tape.param(t(&[2, 2], &[1.0; 4]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.wrt(x).data(), &[1.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, v).is_err());
    }

    #[test]
    fn cosine_of_zero_vector_is_guarded() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[3]));
        let b = tape.param(t(&[3], &[1.0, 0.0, 0.0]));
        let c = tape.cosine(a, b).unwrap();
        assert_eq!(tape.item(c), 0.0);
        let g = tape.backward(c).unwrap();
        assert!(g.wrt(a).all_finite() && g.wrt(b).all_finite());
    }

    #[test]
    fn nodes_precede_their_users() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.matmul(a, a).unwrap();
        let c = tape.softmax(b).unwrap();
        assert!(a < b && b < c);
        assert_eq!(tape.kind(c), OpKind::Softmax);
        assert_eq!(tape.len(), 3);
    }
}
