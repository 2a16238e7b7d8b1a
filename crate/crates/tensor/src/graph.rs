//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Node ids are
//! allocated in evaluation order, so walking them backwards is a valid
//! topological order for the reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::Tensor;
use crate::conv::{self, Conv2dSpec};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    SumAxes(Var),
    Reshape(Var),
    VarAxes(Var, Vec<usize>),
    MatMul(Var, Var, bool, bool),
    Conv2d(Var, Var, Conv2dSpec),
    LogSoftmax(Var),
    RowNormalize(Var, f64),
    RowNorm(Var),
    Narrow(Var, usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn unary(&self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(&self.value(b));
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(&self.value(b));
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(&self.value(b));
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_with(&self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::MulScalar(a, s))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.unary(a, v, Op::PowScalar(a, p))
    }

    pub fn square(&self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    /// Sum over `axes`, which are kept with extent 1.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let v = self.value(a).sum_axes(axes);
        self.unary(a, v, Op::SumAxes(a))
    }

    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a);
        let n: usize = axes.iter().map(|&i| shape[i]).product();
        let s = self.sum_axes(a, axes);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::SumAxes(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Population variance over `axes`, kept with extent 1.
    pub fn var_axes(&self, a: Var, axes: &[usize]) -> Var {
        let x = self.value(a);
        let mean = x.mean_axes(axes);
        let v = x.sub(&mean).map(|d| d * d).mean_axes(axes);
        self.unary(a, v, Op::VarAxes(a, axes.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = (*self.value(a)).clone().reshape(shape);
        self.unary(a, v, Op::Reshape(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let v = self.value(a).matmul_t(&self.value(b), trans_a, trans_b);
        self.binary(a, b, v, Op::MatMul(a, b, trans_a, trans_b))
    }

    pub fn conv2d(&self, x: Var, weight: Var, spec: Conv2dSpec) -> Var {
        let v = conv::conv2d(&self.value(x), &self.value(weight), spec);
        self.binary(x, weight, v, Op::Conv2d(x, weight, spec))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ndim(), 2, "log_softmax expects a matrix");
        let cols = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.unary(a, Tensor::new(x.shape(), out), Op::LogSoftmax(a))
    }

    /// Divides every row of a matrix by `‖row‖₂ + eps`.
    pub fn row_normalize(&self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        assert_eq!(x.ndim(), 2, "row_normalize expects a matrix");
        let cols = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.extend(row.iter().map(|v| v / (n + eps)));
        }
        self.unary(a, Tensor::new(x.shape(), out), Op::RowNormalize(a, eps))
    }

    /// Euclidean norm of every row of a matrix, shape `[N, 1]`. The gradient
    /// at a zero row is taken to be zero.
    pub fn row_norm(&self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ndim(), 2, "row_norm expects a matrix");
        let cols = x.shape()[1];
        let out: Vec<f64> = x
            .data()
            .chunks(cols)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.unary(a, Tensor::new(&[x.shape()[0], 1], out), Op::RowNorm(a))
    }

    /// Euclidean norm of all entries, as a rank-0 tensor.
    pub fn norm(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[1, n]);
        let r = self.row_norm(flat);
        self.reshape(r, &[])
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(a).narrow(axis, start, len);
        self.unary(a, v, Op::Narrow(a, axis, start))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.len(),
            1,
            "backward() needs a single-element output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(nodes[output.0].value.shape()));

        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor| {
                if !rg(v) {
                    return;
                }
                let t = t.sum_to_shape(nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(existing) => existing.axpy(1.0, &t),
                    slot => *slot = Some(t),
                }
            };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(b) {
                        acc(b, g.clone());
                    }
                    acc(a, g);
                }
                Op::Sub(a, b) => {
                    if rg(b) {
                        acc(b, g.scale(-1.0));
                    }
                    acc(a, g);
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        acc(a, g.mul(val(b)));
                    }
                    if rg(b) {
                        acc(b, g.mul(val(a)));
                    }
                }
                Op::Div(a, b) => {
                    if rg(a) {
                        acc(a, g.zip_with(val(b), |g, y| g / y));
                    }
                    if rg(b) {
                        // d(x/y)/dy = -out / y
                        let t = g.mul(&node.value).zip_with(val(b), |go, y| -go / y);
                        acc(b, t);
                    }
                }
                Op::AddScalar(a) => acc(a, g),
                Op::MulScalar(a, s) => acc(a, g.scale(s)),
                Op::PowScalar(a, p) => {
                    let t = g.zip_with(val(a), |g, x| g * p * x.powf(p - 1.0));
                    acc(a, t);
                }
                Op::Exp(a) => acc(a, g.mul(&node.value)),
                Op::Log(a) => acc(a, g.zip_with(val(a), |g, x| g / x)),
                Op::Relu(a) => {
                    acc(a, g.zip_with(val(a), |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::Softplus(a) => acc(a, g.zip_with(val(a), |g, x| g * sigmoid(x))),
                Op::SumAxes(a) => acc(a, g.broadcast_to(val(a).shape())),
                Op::Reshape(a) => acc(a, g.reshape(val(a).shape())),
                Op::VarAxes(a, ref axes) => {
                    let x = val(a);
                    let n: usize = axes.iter().map(|&i| x.shape()[i]).product();
                    let centered = x.sub(&x.mean_axes(axes));
                    acc(a, centered.mul(&g).scale(2.0 / n as f64));
                }
                Op::MatMul(a, b, ta, tb) => {
                    if rg(a) {
                        let da = if ta {
                            val(b).matmul_t(&g, tb, true)
                        } else {
                            g.matmul_t(val(b), false, !tb)
                        };
                        acc(a, da);
                    }
                    if rg(b) {
                        let db = if tb {
                            g.matmul_t(val(a), true, ta)
                        } else {
                            val(a).matmul_t(&g, !ta, false)
                        };
                        acc(b, db);
                    }
                }
                Op::Conv2d(x, w, spec) => {
                    let (dx, dw) =
                        conv::conv2d_backward(val(x), val(w), &g, spec, rg(x), rg(w));
                    if let Some(dx) = dx {
                        acc(x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(w, dw);
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let cols = y.shape()[1];
                    let mut out = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                        let gs: f64 = gr.iter().sum();
                        out.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gs));
                    }
                    acc(a, Tensor::new(y.shape(), out));
                }
                Op::RowNormalize(a, eps) => {
                    let x = val(a);
                    let cols = x.shape()[1];
                    let mut out = Vec::with_capacity(x.len());
                    for (xr, gr) in x.data().chunks(cols).zip(g.data().chunks(cols)) {
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let d = n + eps;
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let k = if n > 0.0 { dot / (n * d * d) } else { 0.0 };
                        out.extend(xr.iter().zip(gr).map(|(xv, gv)| gv / d - k * xv));
                    }
                    acc(a, Tensor::new(x.shape(), out));
                }
                Op::RowNorm(a) => {
                    let x = val(a);
                    let cols = x.shape()[1];
                    let mut out = Vec::with_capacity(x.len());
                    for ((xr, &gr), &n) in x
                        .data()
                        .chunks(cols)
                        .zip(g.data())
                        .zip(node.value.data())
                    {
                        let k = if n > 0.0 { gr / n } else { 0.0 };
                        out.extend(xr.iter().map(|xv| k * xv));
                    }
                    acc(a, Tensor::new(x.shape(), out));
                }
                Op::Narrow(a, axis, start) => {
                    let shape = val(a).shape().to_vec();
                    let len = g.shape()[axis];
                    let mut parts = Vec::new();
                    let mut pre = shape.clone();
                    pre[axis] = start;
                    let mut post = shape.clone();
                    post[axis] = shape[axis] - start - len;
                    let (pz, qz) = (Tensor::zeros(&pre), Tensor::zeros(&post));
                    if start > 0 {
                        parts.push(&pz);
                    }
                    parts.push(&g);
                    if post[axis] > 0 {
                        parts.push(&qz);
                    }
                    acc(a, Tensor::concat(&parts, axis));
                }
            }
        }
        Gradients { grads }
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
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}
