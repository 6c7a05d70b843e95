//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only trace. Every operation pushes a node holding
//! its forward value and the ids of its inputs, so nodes are topologically
//! ordered by construction. [`Graph::backward`] walks the trace once in
//! reverse and consumes it; a second call on the same trace is an error.
//!
//! ```
//! use infoat::autodiff::Graph;
//! use infoat::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Stride-1 2-D convolution over `channels × height × width` inputs stored
/// flat per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// 2×2, stride-2 max pooling geometry (odd trailing rows/columns dropped).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        self.height / 2
    }

    pub fn out_width(&self) -> usize {
        self.width / 2
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Softmax(usize),
    Pick(usize, Rc<[usize]>),
    MaxExcept(usize, Vec<usize>),
    Reshape(usize),
    Conv2d(usize, usize, ConvGeometry),
    MaxPool(usize, Vec<usize>),
    LogMeanExp(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only computation trace.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Result<Tensor> {
        if var.graph != self.graph || var.index >= self.grads.len() {
            return Err(Error::DetachedTrace);
        }
        Ok(match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.index]),
        })
    }
}

/// Applies `f` elementwise with scalar-vs-tensor broadcasting.
fn broadcast(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.len() == 1 {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.len() == 1 {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

/// Reduces an upstream gradient back onto an operand that may have been
/// broadcast from a single element.
fn unbroadcast(grad: Vec<f64>, target: &Tensor) -> Tensor {
    if grad.len() == target.len() {
        Tensor::new(target.shape().to_vec(), grad).expect("gradient shape")
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.iter().sum()]).expect("scalar gradient")
    }
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::matrix(rows, cols, out)
}

fn conv2d_forward(x: &[f64], w: &[f64], rows: usize, geo: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, wd, k, pad) = (
        geo.height as isize,
        geo.width as isize,
        geo.kernel,
        geo.padding as isize,
    );
    let mut out = vec![0.0; rows * geo.out_len()];
    for r in 0..rows {
        let xr = &x[r * geo.in_len()..(r + 1) * geo.in_len()];
        let or = &mut out[r * geo.out_len()..(r + 1) * geo.out_len()];
        for o in 0..geo.out_channels {
            for c in 0..geo.in_channels {
                let wk = &w[(o * geo.in_channels + c) * k * k..(o * geo.in_channels + c + 1) * k * k];
                let xc = &xr[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            let yi = i as isize + ki as isize - pad;
                            if yi < 0 || yi >= h {
                                continue;
                            }
                            for kj in 0..k {
                                let xj = j as isize + kj as isize - pad;
                                if xj < 0 || xj >= wd {
                                    continue;
                                }
                                acc += wk[ki * k + kj] * xc[yi as usize * geo.width + xj as usize];
                            }
                        }
                        or[o * oh * ow + i * ow + j] += acc;
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    upstream: &[f64],
    rows: usize,
    geo: &ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, wd, k, pad) = (
        geo.height as isize,
        geo.width as isize,
        geo.kernel,
        geo.padding as isize,
    );
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    for r in 0..rows {
        let base_x = r * geo.in_len();
        let ur = &upstream[r * geo.out_len()..(r + 1) * geo.out_len()];
        for o in 0..geo.out_channels {
            for c in 0..geo.in_channels {
                let wbase = (o * geo.in_channels + c) * k * k;
                let cbase = base_x + c * geo.height * geo.width;
                for i in 0..oh {
                    for j in 0..ow {
                        let u = ur[o * oh * ow + i * ow + j];
                        if u == 0.0 {
                            continue;
                        }
                        for ki in 0..k {
                            let yi = i as isize + ki as isize - pad;
                            if yi < 0 || yi >= h {
                                continue;
                            }
                            for kj in 0..k {
                                let xj = j as isize + kj as isize - pad;
                                if xj < 0 || xj >= wd {
                                    continue;
                                }
                                let xi = cbase + yi as usize * geo.width + xj as usize;
                                if need_w {
                                    gw[wbase + ki * k + kj] += u * x[xi];
                                }
                                if need_x {
                                    gx[xi] += u * w[wbase + ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<Rc<Tensor>> {
        self.check(var)?;
        Ok(Rc::clone(&self.nodes.borrow()[var.index].value))
    }

    pub fn shape(&self, var: Var) -> Result<Vec<usize>> {
        Ok(self.value(var)?.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn item(&self, var: Var) -> Result<f64> {
        self.value(var)?.item()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.graph != self.id || var.index >= self.nodes.borrow().len() {
            return Err(Error::DetachedTrace);
        }
        Ok(())
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes.borrow()[var.index].requires_grad
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(value, op, requires_grad))
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a)?;
        self.record(name, va.map(f), op, &[a])
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let out = broadcast(name, &va, &vb, f)?;
        self.record(name, out, op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.index, b.index))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a.index))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a.index, factor))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.index))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        if let Some(&bad) = va.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::NonPositiveLog(bad));
        }
        self.record("log", va.map(f64::ln), Op::Log(a.index), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.index))
    }

    /// Clamps into `[lo, hi]`; either bound may be infinite. The gradient is
    /// passed through strictly inside the interval and is zero elsewhere.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a.index, lo, hi))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let (m, k) = va.dims2()?;
        let (k2, n) = vb.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let out = Tensor::matrix(m, n, matmul_raw(va.data(), vb.data(), m, k, n))?;
        self.record("matmul", out, Op::MatMul(a.index, b.index), &[a, b])
    }

    /// Adds a length-`k` bias to every row of an `n × k` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x)?, self.value(bias)?);
        let (rows, cols) = vx.dims2()?;
        if vb.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for r in 0..rows {
            for (d, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        self.record(
            "add_bias",
            Tensor::matrix(rows, cols, data)?,
            Op::AddBias(x.index, bias.index),
            &[x, bias],
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        let out = Tensor::scalar(va.data().iter().sum());
        self.record("sum", out, Op::Sum(a.index), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        if va.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let out = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        self.record("mean", out, Op::Mean(a.index), &[a])
    }

    /// Row sums of an `n × k` matrix, as a length-`n` vector.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        let (rows, _) = va.dims2()?;
        let out = Tensor::vector((0..rows).map(|r| va.row(r).iter().sum()).collect());
        self.record("sum_rows", out, Op::SumRows(a.index), &[a])
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        let out = softmax_rows(&va)?;
        self.record("softmax", out, Op::Softmax(a.index), &[a])
    }

    /// `out[i] = a[i, labels[i]]`.
    pub fn pick(&self, a: Var, labels: &[usize]) -> Result<Var> {
        let va = self.value(a)?;
        let (rows, cols) = va.dims2()?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: va.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange { label, classes: cols });
        }
        let out = Tensor::vector(labels.iter().enumerate().map(|(r, &l)| va.row(r)[l]).collect());
        self.record("pick", out, Op::Pick(a.index, labels.into()), &[a])
    }

    /// `out[i] = max_{k ≠ labels[i]} a[i, k]`; ties go to the lowest index.
    pub fn max_except(&self, a: Var, labels: &[usize]) -> Result<Var> {
        let va = self.value(a)?;
        let (rows, cols) = va.dims2()?;
        if cols < 2 {
            return Err(Error::invalid("max_except needs at least two columns"));
        }
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "max_except",
                left: va.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut arg = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (r, &label) in labels.iter().enumerate() {
            if label >= cols {
                return Err(Error::LabelOutOfRange { label, classes: cols });
            }
            let row = va.row(r);
            let mut best = usize::MAX;
            for (k, &v) in row.iter().enumerate() {
                if k != label && (best == usize::MAX || v > row[best]) {
                    best = k;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        self.record("max_except", Tensor::vector(out), Op::MaxExcept(a.index, arg), &[a])
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a)?;
        let out = (*va).clone().reshape(shape)?;
        self.record("reshape", out, Op::Reshape(a.index), &[a])
    }

    /// Convolution of `x: n × (C·H·W)` with `w: O × (C·k·k)`, giving
    /// `n × (O·H'·W')`.
    pub fn conv2d(&self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let (vx, vw) = (self.value(x)?, self.value(w)?);
        let (rows, cols) = vx.dims2()?;
        if cols != geo.in_len() || vw.len() != geo.weight_len() || geo.kernel > geo.height + 2 * geo.padding {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: vx.shape().to_vec(),
                right: vw.shape().to_vec(),
            });
        }
        let out = conv2d_forward(vx.data(), vw.data(), rows, &geo);
        let out = Tensor::matrix(rows, geo.out_len(), out)?;
        self.record("conv2d", out, Op::Conv2d(x.index, w.index, geo), &[x, w])
    }

    pub fn max_pool(&self, x: Var, geo: PoolGeometry) -> Result<Var> {
        let vx = self.value(x)?;
        let (rows, cols) = vx.dims2()?;
        if cols != geo.in_len() {
            return Err(Error::ShapeMismatch {
                op: "max_pool",
                left: vx.shape().to_vec(),
                right: vec![rows, geo.in_len()],
            });
        }
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let mut out = Vec::with_capacity(rows * geo.out_len());
        let mut arg = Vec::with_capacity(rows * geo.out_len());
        for r in 0..rows {
            for c in 0..geo.channels {
                let base = r * cols + c * geo.height * geo.width;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = base + 2 * i * geo.width + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * geo.width + 2 * j + dj;
                            if vx.data()[idx] > vx.data()[best] {
                                best = idx;
                            }
                        }
                        arg.push(best);
                        out.push(vx.data()[best]);
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, geo.out_len(), out)?;
        self.record("max_pool", out, Op::MaxPool(x.index, arg), &[x])
    }

    /// `log(mean(exp(a)))`, computed stably.
    pub fn log_mean_exp(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        if va.is_empty() {
            return Err(Error::invalid("log_mean_exp of empty tensor"));
        }
        let max = va.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = va.data().iter().map(|v| (v - max).exp()).sum();
        let out = Tensor::scalar(max + (total / va.len() as f64).ln());
        self.record("log_mean_exp", out, Op::LogMeanExp(a.index), &[a])
    }

    /// Propagates gradients from a scalar `root` and consumes the trace.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if self.consumed.get() {
            return Err(Error::TraceConsumed);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.index].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.index).map(|_| None).collect();
        grads[root.index] = Some(vec![1.0]);

        fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, delta: Vec<f64>) {
            match &mut grads[index] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        for index in (0..=root.index).rev() {
            let node = &nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let value = &node.value;
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[index] = Some(upstream);
                    continue;
                }
                &Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(
                            &mut grads,
                            a,
                            unbroadcast(upstream.clone(), &nodes[a].value).into_data(),
                        );
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, unbroadcast(upstream, &nodes[b].value).into_data());
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(
                            &mut grads,
                            a,
                            unbroadcast(upstream.clone(), &nodes[a].value).into_data(),
                        );
                    }
                    if needs(b) {
                        let neg: Vec<f64> = upstream.iter().map(|u| -u).collect();
                        accumulate(&mut grads, b, unbroadcast(neg, &nodes[b].value).into_data());
                    }
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    let other = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
                    if needs(a) {
                        let g: Vec<f64> = upstream.iter().enumerate().map(|(i, u)| u * other(vb, i)).collect();
                        accumulate(&mut grads, a, unbroadcast(g, va).into_data());
                    }
                    if needs(b) {
                        let g: Vec<f64> = upstream.iter().enumerate().map(|(i, u)| u * other(va, i)).collect();
                        accumulate(&mut grads, b, unbroadcast(g, vb).into_data());
                    }
                }
                &Op::Neg(a) => accumulate(&mut grads, a, upstream.iter().map(|u| -u).collect()),
                &Op::Scale(a, f) => accumulate(&mut grads, a, upstream.iter().map(|u| u * f).collect()),
                &Op::Exp(a) => {
                    let g = upstream.iter().zip(value.data()).map(|(u, y)| u * y).collect();
                    accumulate(&mut grads, a, g);
                }
                &Op::Log(a) => {
                    let g = upstream.iter().zip(nodes[a].value.data()).map(|(u, x)| u / x).collect();
                    accumulate(&mut grads, a, g);
                }
                &Op::Relu(a) => {
                    let g = upstream
                        .iter()
                        .zip(nodes[a].value.data())
                        .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, g);
                }
                &Op::Clamp(a, lo, hi) => {
                    let g = upstream
                        .iter()
                        .zip(nodes[a].value.data())
                        .map(|(&u, &x)| if x > lo && x < hi { u } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, g);
                }
                &Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    let (m, k) = va.dims2()?;
                    let (_, n) = vb.dims2()?;
                    if needs(a) {
                        accumulate(&mut grads, a, matmul_nt(&upstream, vb.data(), m, n, k));
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, matmul_tn(va.data(), &upstream, m, k, n));
                    }
                }
                &Op::AddBias(x, b) => {
                    let cols = nodes[b].value.len();
                    if needs(b) {
                        let mut g = vec![0.0; cols];
                        for row in upstream.chunks(cols) {
                            for (gi, u) in g.iter_mut().zip(row) {
                                *gi += u;
                            }
                        }
                        accumulate(&mut grads, b, g);
                    }
                    if needs(x) {
                        accumulate(&mut grads, x, upstream);
                    }
                }
                &Op::Sum(a) => accumulate(&mut grads, a, vec![upstream[0]; nodes[a].value.len()]),
                &Op::Mean(a) => {
                    let len = nodes[a].value.len();
                    accumulate(&mut grads, a, vec![upstream[0] / len as f64; len]);
                }
                &Op::SumRows(a) => {
                    let (_, cols) = nodes[a].value.dims2()?;
                    let g = upstream.iter().flat_map(|&u| std::iter::repeat_n(u, cols)).collect();
                    accumulate(&mut grads, a, g);
                }
                &Op::Softmax(a) => {
                    let (_, cols) = value.dims2()?;
                    let mut g = vec![0.0; upstream.len()];
                    for ((gr, ur), pr) in g
                        .chunks_mut(cols)
                        .zip(upstream.chunks(cols))
                        .zip(value.data().chunks(cols))
                    {
                        let dot: f64 = ur.iter().zip(pr).map(|(u, p)| u * p).sum();
                        for ((gi, u), p) in gr.iter_mut().zip(ur).zip(pr) {
                            *gi = p * (u - dot);
                        }
                    }
                    accumulate(&mut grads, a, g);
                }
                Op::Pick(a, labels) => {
                    let (_, cols) = nodes[*a].value.dims2()?;
                    let mut g = vec![0.0; nodes[*a].value.len()];
                    for (r, (&l, &u)) in labels.iter().zip(&upstream).enumerate() {
                        g[r * cols + l] = u;
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MaxExcept(a, arg) => {
                    let (_, cols) = nodes[*a].value.dims2()?;
                    let mut g = vec![0.0; nodes[*a].value.len()];
                    for (r, (&k, &u)) in arg.iter().zip(&upstream).enumerate() {
                        g[r * cols + k] = u;
                    }
                    accumulate(&mut grads, *a, g);
                }
                &Op::Reshape(a) => accumulate(&mut grads, a, upstream),
                &Op::Conv2d(x, w, ref geo) => {
                    let (vx, vw) = (&nodes[x].value, &nodes[w].value);
                    let (rows, _) = vx.dims2()?;
                    let (gx, gw) = conv2d_backward(vx.data(), vw.data(), &upstream, rows, geo, needs(x), needs(w));
                    if needs(x) {
                        accumulate(&mut grads, x, gx);
                    }
                    if needs(w) {
                        accumulate(&mut grads, w, gw);
                    }
                }
                Op::MaxPool(a, arg) => {
                    let mut g = vec![0.0; nodes[*a].value.len()];
                    for (&src, &u) in arg.iter().zip(&upstream) {
                        g[src] += u;
                    }
                    accumulate(&mut grads, *a, g);
                }
                &Op::LogMeanExp(a) => {
                    let va = &nodes[a].value;
                    let out = value.data()[0];
                    let n = va.len() as f64;
                    let g = va.data().iter().map(|v| upstream[0] * (v - out).exp() / n).collect();
                    accumulate(&mut grads, a, g);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::new(nodes[i].value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes,
        })
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
