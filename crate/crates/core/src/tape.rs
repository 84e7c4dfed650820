//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! value. [`Tape::backward`] walks the records in reverse and returns the
//! gradient of a scalar root with respect to every node that depends on a
//! parameter. A tape is built per forward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    Square,
    Scale(f64),
    Shift(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Sum { x: Var, axis: Option<usize> },
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    Conv1d { x: Var, w: Var, b: Var },
    SqDist(Var, Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    Diag(Var),
    SafeDiv { num: Var, den: Var, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| mismatch(name, ta, tb))?;
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::new(out_shape, data)?
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(name, value, Op::Binary(kind, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let (name, f): (&'static str, Box<dyn Fn(f64) -> f64>) = match kind {
            Unary::Neg => ("neg", Box::new(|v: f64| -v)),
            Unary::Exp => ("exp", Box::new(f64::exp)),
            Unary::Log => ("log", Box::new(f64::ln)),
            Unary::Tanh => ("tanh", Box::new(f64::tanh)),
            Unary::Relu => ("relu", Box::new(|v: f64| v.max(0.0))),
            Unary::Softplus => ("softplus", Box::new(softplus)),
            Unary::Square => ("square", Box::new(|v: f64| v * v)),
            Unary::Scale(s) => ("scale", Box::new(move |v: f64| v * s)),
            Unary::Shift(s) => ("shift", Box::new(move |v: f64| v + s)),
        };
        let value = self.nodes[x.0].value.map(f);
        let ng = self.needs(x);
        self.push(name, value, Op::Unary(kind, x), ng)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn shift(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Shift(s), x)
    }

    // ---- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.ndim() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", t.shape()),
            });
        }
        let value = t.transpose2();
        let ng = self.needs(x);
        self.push("transpose", value, Op::Transpose(x), ng)
    }

    /// Lower Cholesky factor of the symmetric part of a square matrix,
    /// with the library's jitter policy.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let value = linalg::cholesky(&self.nodes[a.0].value)?;
        let ng = self.needs(a);
        self.push("cholesky", value, Op::Cholesky(a), ng)
    }

    /// `L⁻¹ B` for lower-triangular `L`; `B` is `[n]` or `[n, m]`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let (tl, tb) = (&self.nodes[l.0].value, &self.nodes[b.0].value);
        let n = linalg::square_dim(tl, "solve_lower")?;
        if tb.ndim() == 0 || tb.ndim() > 2 || tb.shape()[0] != n {
            return Err(mismatch("solve_lower", tl, tb));
        }
        let m = tb.len() / n.max(1);
        let mut x = tb.clone();
        linalg::solve_lower_in_place(tl.data(), n, x.data_mut(), m);
        let ng = self.needs(l) || self.needs(b);
        self.push("solve_lower", x, Op::SolveLower(l, b), ng)
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        linalg::square_dim(t, "diag")?;
        let value = Tensor::vector(t.diagonal());
        let ng = self.needs(a);
        self.push("diag", value, Op::Diag(a), ng)
    }

    /// Pairwise squared Euclidean distances between rows: `[n,d] × [m,d] → [n,m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.cols() {
            return Err(mismatch("sq_dist", ta, tb));
        }
        let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &da[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &db[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("sq_dist", value, Op::SqDist(a, b), ng)
    }

    // ---- reductions and shape ops -----------------------------------

    /// Sum over one axis (removing it), or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = match axis {
            None => Tensor::scalar(t.sum()),
            Some(ax) => {
                if ax >= t.ndim() {
                    return Err(Error::InvalidShape {
                        op: "sum",
                        msg: format!("axis {ax} out of range for {:?}", t.shape()),
                    });
                }
                let (outer, len, inner) = axis_split(t.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                let d = t.data();
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, out)?
            }
        };
        let ng = self.needs(x);
        self.push("sum", value, Op::Sum { x, axis }, ng)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = match axis {
            None => t.len(),
            Some(ax) => *t.shape().get(ax).unwrap_or(&1),
        };
        let s = self.sum(x, axis)?;
        if n == 0 {
            return Ok(s);
        }
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.needs(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        match broadcast_shape(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let sa = broadcast_strides(t.shape(), shape);
        let mut data = vec![0.0; shape.iter().product()];
        let d = t.data();
        for_each_broadcast(shape, &sa, &sa, |o, i, _| data[o] = d[i]);
        let value = Tensor::new(shape.to_vec(), data)?;
        let ng = self.needs(x);
        self.push("broadcast_to", value, Op::BroadcastTo(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = &self.nodes[xs[0].0].value;
        let mut shape = first.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for {:?}", shape),
            });
        }
        let mut total = 0;
        for v in xs {
            let t = &self.nodes[v.0].value;
            let ok = t.ndim() == shape.len()
                && t.shape()
                    .iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch("concat", first, t));
            }
            total += t.shape()[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let ng = xs.iter().any(|v| self.needs(*v));
        self.push("concat", value, Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() || start + len > t.shape()[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            });
        }
        let (outer, full, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        self.push("slice", value, Op::Slice { x, axis, start }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", t.shape()),
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push("softmax", value, Op::Softmax { x, axis }, ng)
    }

    /// Stride-1 1-D convolution with symmetric zero padding (output length
    /// equals input length). `x: [c_in, n]`, `w: [c_out, c_in, k]` with odd
    /// `k`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if tx.ndim() != 2 || tw.ndim() != 3 || tw.shape()[1] != tx.rows() || tw.shape()[2] % 2 == 0 {
            return Err(mismatch("conv1d", tx, tw));
        }
        if tb.shape() != [tw.shape()[0]] {
            return Err(mismatch("conv1d", tw, tb));
        }
        let (c_in, n) = (tx.rows(), tx.cols());
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        let cols = im2col(tx.data(), c_in, n, k);
        let mut out = vec![0.0; c_out * n];
        for (o, bias) in tb.data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(*bias);
        }
        linalg::gemm(c_out, c_in * k, n, tw.data(), c_in * k, 1, &cols, n, 1, &mut out, 1.0);
        let value = Tensor::matrix(c_out, n, out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("conv1d", value, Op::Conv1d { x, w, b }, ng)
    }

    /// `num / den` where `den > eps`, and 0 elsewhere. Same shapes.
    pub fn safe_div(&mut self, num: Var, den: Var, eps: f64) -> Result<Var> {
        let (tn, td) = (&self.nodes[num.0].value, &self.nodes[den.0].value);
        if tn.shape() != td.shape() {
            return Err(mismatch("safe_div", tn, td));
        }
        let data = tn
            .data()
            .iter()
            .zip(td.data())
            .map(|(&a, &d)| if d > eps { a / d } else { 0.0 })
            .collect();
        let value = Tensor::new(tn.shape().to_vec(), data)?;
        let ng = self.needs(num) || self.needs(den);
        self.push("safe_div", value, Op::SafeDiv { num, den, eps }, ng)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                let mut step = |o: usize, i: usize, j: usize| match kind {
                    Binary::Add => {
                        ga[i] += dg[o];
                        gb[j] += dg[o];
                    }
                    Binary::Sub => {
                        ga[i] += dg[o];
                        gb[j] -= dg[o];
                    }
                    Binary::Mul => {
                        ga[i] += dg[o] * db[j];
                        gb[j] += dg[o] * da[i];
                    }
                    Binary::Div => {
                        ga[i] += dg[o] / db[j];
                        gb[j] -= dg[o] * da[i] / (db[j] * db[j]);
                    }
                };
                if ta.shape() == tb.shape() {
                    for o in 0..dg.len() {
                        step(o, o, o);
                    }
                } else {
                    let sa = broadcast_strides(ta.shape(), y.shape());
                    let sb = broadcast_strides(tb.shape(), y.shape());
                    for_each_broadcast(y.shape(), &sa, &sb, step);
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::Unary(kind, x) => {
                let tx = self.value(*x);
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| match kind {
                        Unary::Neg => -gi,
                        Unary::Exp => gi * yi,
                        Unary::Log => gi / xi,
                        Unary::Tanh => gi * (1.0 - yi * yi),
                        Unary::Relu => {
                            if xi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        Unary::Softplus => gi * sigmoid(xi),
                        Unary::Square => 2.0 * gi * xi,
                        Unary::Scale(s) => gi * s,
                        Unary::Shift(_) => gi,
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; m * k];
                    linalg::gemm(m, n, k, g.data(), n, 1, tb.data(), 1, n, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(*b) {
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * n];
                    linalg::gemm(k, m, n, ta.data(), 1, k, g.data(), n, 1, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Sum { x, axis } => {
                let tx = self.value(*x);
                let gx = match axis {
                    None => Tensor::full(tx.shape(), g.item()),
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(tx.shape(), *ax);
                        let mut out = vec![0.0; tx.len()];
                        let dg = g.data();
                        for o in 0..outer {
                            for k in 0..len {
                                let base = (o * len + k) * inner;
                                out[base..base + inner].copy_from_slice(&dg[o * inner..(o + 1) * inner]);
                            }
                        }
                        Tensor::new(tx.shape().to_vec(), out)?
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose2()),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape)?);
            }
            Op::BroadcastTo(x) => {
                let tx = self.value(*x);
                let sa = broadcast_strides(tx.shape(), y.shape());
                let mut out = vec![0.0; tx.len()];
                let dg = g.data();
                for_each_broadcast(y.shape(), &sa, &sa, |o, i, _| out[i] += dg[o]);
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), out)?);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let tv = self.value(*v);
                    let len = tv.shape()[*axis];
                    if self.needs(*v) {
                        let mut out = Vec::with_capacity(tv.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, *v, Tensor::new(tv.shape().to_vec(), out)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, full, inner) = axis_split(tx.shape(), *axis);
                let len = y.shape()[*axis];
                let mut out = vec![0.0; tx.len()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), out)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (dy, dg) = (y.data(), g.data());
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| dy[at(k)] * dg[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = dy[at(k)] * (dg[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c_in, n) = (tx.rows(), tx.cols());
                let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
                let ck = c_in * k;
                if self.needs(*w) {
                    let cols = im2col(tx.data(), c_in, n, k);
                    let mut dw = vec![0.0; c_out * ck];
                    // dW = G colsᵀ
                    linalg::gemm(c_out, n, ck, g.data(), n, 1, &cols, 1, n, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(tw.shape().to_vec(), dw)?);
                }
                if self.needs(*b) {
                    let db = (0..c_out).map(|o| g.data()[o * n..(o + 1) * n].iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
                if self.needs(*x) {
                    // dcols = Wᵀ G, then scatter back
                    let mut dcols = vec![0.0; ck * n];
                    linalg::gemm(ck, c_out, n, tw.data(), 1, ck, g.data(), n, 1, &mut dcols, 0.0);
                    let dx = col2im(&dcols, c_in, n, k);
                    self.accumulate(grads, *x, Tensor::matrix(c_in, n, dx)?);
                }
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let c = 2.0 * dg[i * m + j];
                        if c == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = c * (da[i * d + t] - db[j * d + t]);
                            ga[i * d + t] += diff;
                            gb[j * d + t] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, d, ga)?);
                self.accumulate(grads, *b, Tensor::matrix(m, d, gb)?);
            }
            Op::Cholesky(a) => {
                let n = y.rows();
                let l = y.data();
                // P = Φ(Lᵀ Ḡ): lower triangle of LᵀḠ with halved diagonal
                let gl: Vec<f64> = (0..n * n)
                    .map(|idx| if idx % n <= idx / n { g.data()[idx] } else { 0.0 })
                    .collect();
                let mut p = vec![0.0; n * n];
                linalg::gemm(n, n, n, l, 1, n, &gl, n, 1, &mut p, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        if j > i {
                            p[i * n + j] = 0.0;
                        } else if j == i {
                            p[i * n + j] *= 0.5;
                        }
                    }
                }
                // S = L⁻ᵀ P L⁻¹ computed as two transposed solves
                let mut pt = Tensor::matrix(n, n, p)?.transpose2().into_data();
                linalg::solve_lower_transpose_in_place(l, n, &mut pt, n);
                let mut s = Tensor::matrix(n, n, pt)?.transpose2().into_data();
                linalg::solve_lower_transpose_in_place(l, n, &mut s, n);
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = 0.5 * (s[i * n + j] + s[j * n + i]);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, n, sym)?);
            }
            Op::SolveLower(lv, bv) => {
                let tl = self.value(*lv);
                let n = tl.rows();
                let m = y.len() / n.max(1);
                // B̄ = L⁻ᵀ Ḡ
                let mut gb = g.data().to_vec();
                linalg::solve_lower_transpose_in_place(tl.data(), n, &mut gb, m);
                if self.needs(*lv) {
                    // L̄ = -tril(B̄ Xᵀ)
                    let mut gl = vec![0.0; n * n];
                    linalg::gemm(n, m, n, &gb, m, 1, y.data(), 1, m, &mut gl, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            gl[i * n + j] = if j <= i { -gl[i * n + j] } else { 0.0 };
                        }
                    }
                    self.accumulate(grads, *lv, Tensor::matrix(n, n, gl)?);
                }
                let shape = self.shape(*bv).to_vec();
                self.accumulate(grads, *bv, Tensor::new(shape, gb)?);
            }
            Op::Diag(a) => {
                let n = y.len();
                let mut out = Tensor::zeros(&[n, n]);
                for (i, v) in g.data().iter().enumerate() {
                    out.set(i, i, *v);
                }
                self.accumulate(grads, *a, out);
            }
            Op::SafeDiv { num, den, eps } => {
                let (tn, td) = (self.value(*num), self.value(*den));
                let mut gn = vec![0.0; tn.len()];
                let mut gd = vec![0.0; td.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    let d = td.data()[i];
                    if d > *eps {
                        gn[i] = gi / d;
                        gd[i] = -gi * tn.data()[i] / (d * d);
                    }
                }
                self.accumulate(grads, *num, Tensor::new(tn.shape().to_vec(), gn)?);
                self.accumulate(grads, *den, Tensor::new(td.shape().to_vec(), gd)?);
            }
        }
        Ok(())
    }
}

/// `[c_in, n] → [c_in·k, n]` patch matrix with zero padding `(k-1)/2`.
fn im2col(x: &[f64], c_in: usize, n: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut cols = vec![0.0; c_in * k * n];
    for c in 0..c_in {
        let row = &x[c * n..(c + 1) * n];
        for t in 0..k {
            let dst = &mut cols[(c * k + t) * n..(c * k + t + 1) * n];
            // dst[g] = row[g + t - pad]
            let lo = pad.saturating_sub(t);
            let hi = (n + pad).saturating_sub(t).min(n);
            for g in lo..hi {
                dst[g] = row[g + t - pad];
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c_in: usize, n: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut x = vec![0.0; c_in * n];
    for c in 0..c_in {
        for t in 0..k {
            let src = &cols[(c * k + t) * n..(c * k + t + 1) * n];
            let lo = pad.saturating_sub(t);
            let hi = (n + pad).saturating_sub(t).min(n);
            for g in lo..hi {
                x[c * n + g + t - pad] += src[g];
            }
        }
    }
    x
}
