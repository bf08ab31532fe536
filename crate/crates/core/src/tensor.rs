//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is define-by-run: every op appends one node holding the op kind,
//! its input ids, and the forward values. Nodes are append-only, so ids are
//! already a topological order and one reverse sweep propagates gradients
//! visiting each node exactly once. A tape lives for a single forward/backward
//! round; solvers rebuild it every iteration.
//!
//! All arithmetic is 64-bit. Layer ops (convolution, pooling, ...) extend
//! `Tape` from the `layers` module; the measurement operator lives in
//! `forward`.

use std::sync::Arc;

use crate::{Error, Result};

/// An owned tensor value: row-major `values` with an explicit `shape`.
///
/// This is the off-tape value type used for inputs, parameters, and results.
/// On-tape intermediates are addressed through [`TensorRef`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` accounts for every value.
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::LengthMismatch(format!(
                "tensor shape {:?} (={} elements) vs {} values",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// One recorded operation together with whatever the backward pass needs.
pub(crate) enum Op {
    Leaf,
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Div(TensorRef, TensorRef),
    Neg(TensorRef),
    Square(TensorRef),
    Sqrt(TensorRef),
    Log(TensorRef),
    ClampMin(TensorRef, f64),
    Sum(TensorRef),
    Mean(TensorRef),
    Matmul(TensorRef, TensorRef),
    Reshape(TensorRef),
    Concat(Vec<TensorRef>),
    Dense { x: TensorRef, w: TensorRef, b: TensorRef },
    Conv2d { x: TensorRef, k: TensorRef, bias: Option<TensorRef>, stride: usize },
    Deconv2d { x: TensorRef, k: TensorRef, stride: usize },
    MaxPool2d { x: TensorRef, argmax: Vec<u32> },
    BatchNorm { x: TensorRef, gamma: TensorRef, beta: TensorRef, mu: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { x: TensorRef, slope: f64 },
    Sigmoid(TensorRef),
    /// y = P·x for a fixed measurement matrix P of shape `m` × numel(x).
    Measure { x: TensorRef, matrix: Arc<Vec<f64>>, m: usize },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Append-only autodiff tape.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: Vec<usize>,
    /// Node count at the moment backward last ran; `None` until then.
    /// Running backward again without recording new ops is an error.
    backward_watermark: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), backward_watermark: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> TensorRef {
        self.push_leaf(t, false)
    }

    /// Records a trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, t: Tensor) -> TensorRef {
        let r = self.push_leaf(t, true);
        self.params.push(r.0);
        r
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorRef {
        self.push(Node { op: Op::Leaf, shape: t.shape, values: t.values, requires_grad, grad: None })
    }

    pub(crate) fn push(&mut self, node: Node) -> TensorRef {
        self.nodes.push(node);
        TensorRef(self.nodes.len() - 1)
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].values
    }

    /// Gradient of the last backward pass, if this node received one.
    /// Trainable leaves unreachable from the loss hold an all-zero gradient.
    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Clones a node's value out of the tape.
    pub fn tensor(&self, t: TensorRef) -> Tensor {
        Tensor { shape: self.nodes[t.0].shape.clone(), values: self.nodes[t.0].values.clone() }
    }

    fn numel(&self, t: TensorRef) -> usize {
        self.nodes[t.0].values.len()
    }

    pub(crate) fn requires(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ---- primitive ops ----

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division. Any zero divisor is an error: the quotient would
    /// be non-finite and poison every gradient behind it.
    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.nodes[b.0].values.iter().any(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("div: zero divisor".into()));
        }
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Shared forward for binary elementwise ops with scalar broadcast on
    /// either side (a scalar operand is any single-element tensor).
    fn elementwise(
        &mut self,
        name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        let (na, nb) = (self.numel(a), self.numel(b));
        let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let (values, shape) = if self.nodes[a.0].shape == self.nodes[b.0].shape {
            (va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(), self.nodes[a.0].shape.clone())
        } else if nb == 1 {
            let y = vb[0];
            (va.iter().map(|&x| f(x, y)).collect(), self.nodes[a.0].shape.clone())
        } else if na == 1 {
            let x = va[0];
            (vb.iter().map(|&y| f(x, y)).collect(), self.nodes[b.0].shape.clone())
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        };
        let requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(Node { op, shape, values, requires_grad, grad: None }))
    }

    pub fn neg(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn square(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise square root. Negative values are an error; the derivative
    /// blows up at exactly zero, so callers should keep inputs strictly
    /// positive when gradients are needed.
    pub fn sqrt(&mut self, a: TensorRef) -> Result<TensorRef> {
        if let Some(i) = self.nodes[a.0].values.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sqrt: negative input {} at index {i}",
                self.nodes[a.0].values[i]
            )));
        }
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Natural log. Non-positive values are an error by contract; clamp first
    /// (see [`Tape::clamp_min`]).
    pub fn log(&mut self, a: TensorRef) -> Result<TensorRef> {
        if let Some(i) = self.nodes[a.0].values.iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log: non-positive input {} at index {i}; clamp inputs first",
                self.nodes[a.0].values[i]
            )));
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// max(x, floor) elementwise. Gradient is zero where the floor is active
    /// (including ties), one elsewhere.
    pub fn clamp_min(&mut self, a: TensorRef, floor: f64) -> Result<TensorRef> {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    fn unary(&mut self, a: TensorRef, f: impl Fn(f64) -> f64, op: Op) -> Result<TensorRef> {
        let values = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let requires_grad = self.requires(a);
        Ok(self.push(Node { op, shape, values, requires_grad, grad: None }))
    }

    /// Sum of all elements; result is a scalar of shape `[1]`.
    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let requires_grad = self.requires(a);
        Ok(self.push(Node { op: Op::Sum(a), shape: vec![1], values: vec![s], requires_grad, grad: None }))
    }

    /// Arithmetic mean of all elements; result is a scalar of shape `[1]`.
    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.numel(a) as f64;
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let requires_grad = self.requires(a);
        Ok(self.push(Node { op: Op::Mean(a), shape: vec![1], values: vec![s / n], requires_grad, grad: None }))
    }

    /// Matrix product of two rank-2 tensors: `[a,b] x [b,c] -> [a,c]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", detail: format!("{sa:?} x {sb:?}") });
        }
        let (rows, inner, cols) = (sa[0], sa[1], sb[1]);
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let out_row = &mut out[i * cols..(i + 1) * cols];
            for k in 0..inner {
                axpy(va[i * inner + k], &vb[k * cols..(k + 1) * cols], out_row);
            }
        }
        let requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(Node {
            op: Op::Matmul(a, b),
            shape: vec![rows, cols],
            values: out,
            requires_grad,
            grad: None,
        }))
    }

    /// Same values, new shape; element count must match.
    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[a.0].shape, shape),
            });
        }
        let values = self.nodes[a.0].values.clone();
        let requires_grad = self.requires(a);
        Ok(self.push(Node { op: Op::Reshape(a), shape: shape.to_vec(), values, requires_grad, grad: None }))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?;
        let trailing = self.nodes[first.0].shape[1..].to_vec();
        let mut axis0 = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s[1..] != trailing[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?}", self.nodes[first.0].shape, s),
                });
            }
            axis0 += s[0];
        }
        let mut values = Vec::with_capacity(axis0 * trailing.iter().product::<usize>().max(1));
        for &p in parts {
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let mut shape = vec![axis0];
        shape.extend_from_slice(&trailing);
        let requires_grad = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Node { op: Op::Concat(parts.to_vec()), shape, values, requires_grad, grad: None }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Gradients land on the nodes and are
    /// read back with [`Tape::grad`]. Trainable leaves the loss does not reach
    /// get an all-zero gradient. Calling backward a second time without
    /// recording new ops is an error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if self.backward_watermark == Some(self.nodes.len()) {
            return Err(Error::BackwardConsumed);
        }
        self.backward_watermark = Some(self.nodes.len());
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &mut after[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            propagate(node, &g, before);
            node.grad = Some(g);
        }

        for &p in &self.params {
            let node = &mut self.nodes[p];
            if node.grad.is_none() {
                node.grad = Some(vec![0.0; node.values.len()]);
            }
        }
        Ok(())
    }
}

/// Adds `g` into the gradient slot of `target`, allocating it on first touch.
/// Skips constants: nothing upstream of them needs a gradient.
fn accumulate(nodes: &mut [Node], target: TensorRef, g: &[f64]) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let slot = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
    for (s, &v) in slot.iter_mut().zip(g) {
        *s += v;
    }
}

fn accumulate_with(nodes: &mut [Node], target: TensorRef, f: impl Fn(usize) -> f64) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let slot = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
    for (i, s) in slot.iter_mut().enumerate() {
        *s += f(i);
    }
}

/// As `accumulate_with`, but the increment may read the target node's own
/// forward values: slot[i] += f(i, values). Needed by ops whose local
/// derivative depends on their input (square, log, leaky ReLU, ...).
fn accumulate_self(nodes: &mut [Node], target: TensorRef, f: impl Fn(usize, &[f64]) -> f64) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let values = &node.values;
    let slot = node.grad.get_or_insert_with(|| vec![0.0; values.len()]);
    for (i, s) in slot.iter_mut().enumerate() {
        *s += f(i, values);
    }
}

fn add_at(nodes: &mut [Node], target: TensorRef, index: usize, v: f64) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let slot = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
    slot[index] += v;
}

/// Routes `g`, the gradient at `node`'s output, to the node's inputs.
/// `before` holds every node with a smaller id, which includes all inputs.
fn propagate(node: &Node, g: &[f64], before: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            binary_bcast(before, *a, *b, g, |_, _| 1.0, |_, _| 1.0);
        }
        Op::Sub(a, b) => {
            binary_bcast(before, *a, *b, g, |_, _| 1.0, |_, _| -1.0);
        }
        Op::Mul(a, b) => {
            binary_bcast(before, *a, *b, g, |_, y| y, |x, _| x);
        }
        Op::Div(a, b) => {
            binary_bcast(before, *a, *b, g, |_, y| 1.0 / y, |x, y| -x / (y * y));
        }
        Op::Neg(a) => accumulate_with(before, *a, |i| -g[i]),
        Op::Square(a) => {
            accumulate_self(before, *a, |i, x| 2.0 * x[i] * g[i]);
        }
        Op::Sqrt(a) => {
            let y = &node.values;
            accumulate_with(before, *a, |i| g[i] / (2.0 * y[i]));
        }
        Op::Log(a) => {
            accumulate_self(before, *a, |i, x| g[i] / x[i]);
        }
        Op::ClampMin(a, floor) => {
            let floor = *floor;
            accumulate_self(before, *a, |i, x| if x[i] > floor { g[i] } else { 0.0 });
        }
        Op::Sum(a) => {
            let g0 = g[0];
            accumulate_with(before, *a, |_| g0);
        }
        Op::Mean(a) => {
            let gn = g[0] / before[a.0].values.len() as f64;
            accumulate_with(before, *a, |_| gn);
        }
        Op::Matmul(a, b) => {
            let (rows, inner) = (before[a.0].shape[0], before[a.0].shape[1]);
            let cols = before[b.0].shape[1];
            if before[a.0].requires_grad {
                let vb = &before[b.0].values;
                let mut da = vec![0.0; rows * inner];
                for i in 0..rows {
                    let g_row = &g[i * cols..(i + 1) * cols];
                    for k in 0..inner {
                        da[i * inner + k] = dot(g_row, &vb[k * cols..(k + 1) * cols]);
                    }
                }
                accumulate_with(before, *a, |i| da[i]);
            }
            if before[b.0].requires_grad {
                let va = &before[a.0].values;
                let mut db = vec![0.0; inner * cols];
                for i in 0..rows {
                    let g_row = &g[i * cols..(i + 1) * cols];
                    for k in 0..inner {
                        axpy(va[i * inner + k], g_row, &mut db[k * cols..(k + 1) * cols]);
                    }
                }
                accumulate_with(before, *b, |i| db[i]);
            }
        }
        Op::Reshape(a) => accumulate(before, *a, g),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = before[p.0].values.len();
                accumulate(before, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::Dense { x, w, b } => crate::layers::dense_backward(before, *x, *w, *b, g),
        Op::Conv2d { x, k, bias, stride } => {
            crate::layers::conv2d_backward(before, *x, *k, *bias, *stride, &node.shape, g)
        }
        Op::Deconv2d { x, k, stride } => {
            crate::layers::deconv2d_backward(before, *x, *k, *stride, &node.shape, g)
        }
        Op::MaxPool2d { x, argmax } => {
            for (o, &src) in argmax.iter().enumerate() {
                add_at(before, *x, src as usize, g[o]);
            }
        }
        Op::BatchNorm { x, gamma, beta, mu, inv_std } => {
            crate::layers::batchnorm_backward(before, *x, *gamma, *beta, mu, inv_std, g)
        }
        Op::LeakyRelu { x, slope } => {
            let slope = *slope;
            accumulate_self(before, *x, |i, xv| if xv[i] > 0.0 { g[i] } else { slope * g[i] });
        }
        Op::Sigmoid(a) => {
            let y = &node.values;
            accumulate_with(before, *a, |i| g[i] * y[i] * (1.0 - y[i]));
        }
        Op::Measure { x, matrix, m } => {
            let node_x = &mut before[x.0];
            if !node_x.requires_grad {
                return;
            }
            let n = node_x.values.len();
            let slot = node_x.grad.get_or_insert_with(|| vec![0.0; n]);
            for r in 0..*m {
                axpy(g[r], &matrix[r * n..(r + 1) * n], slot);
            }
        }
    }
}

/// Gradient routing for binary elementwise ops with scalar broadcast.
/// `dfa`/`dfb` give ∂out/∂a and ∂out/∂b at one element pair.
fn binary_bcast(
    before: &mut [Node],
    a: TensorRef,
    b: TensorRef,
    g: &[f64],
    dfa: impl Fn(f64, f64) -> f64,
    dfb: impl Fn(f64, f64) -> f64,
) {
    let na = before[a.0].values.len();
    let nb = before[b.0].values.len();
    if na == nb {
        if before[a.0].requires_grad {
            let contrib: Vec<f64> = (0..na)
                .map(|i| g[i] * dfa(before[a.0].values[i], before[b.0].values[i]))
                .collect();
            accumulate_with(before, a, |i| contrib[i]);
        }
        if before[b.0].requires_grad {
            let contrib: Vec<f64> = (0..nb)
                .map(|i| g[i] * dfb(before[a.0].values[i], before[b.0].values[i]))
                .collect();
            accumulate_with(before, b, |i| contrib[i]);
        }
    } else if nb == 1 {
        let y = before[b.0].values[0];
        if before[a.0].requires_grad {
            let xs: Vec<f64> = before[a.0].values.clone();
            accumulate_with(before, a, |i| g[i] * dfa(xs[i], y));
        }
        if before[b.0].requires_grad {
            let total: f64 =
                (0..na).map(|i| g[i] * dfb(before[a.0].values[i], y)).sum();
            add_at(before, b, 0, total);
        }
    } else {
        // na == 1, mirrored.
        let x = before[a.0].values[0];
        if before[b.0].requires_grad {
            let ys: Vec<f64> = before[b.0].values.clone();
            accumulate_with(before, b, |i| g[i] * dfb(x, ys[i]));
        }
        if before[a.0].requires_grad {
            let total: f64 =
                (0..nb).map(|i| g[i] * dfa(x, before[b.0].values[i])).sum();
            add_at(before, a, 0, total);
        }
    }
}

// ---- shared numeric kernels ----
// These two loops carry most of the FLOPs in the crate; both shapes
// auto-vectorize. Keep them branch-free.

/// y += c * x over equal-length slices.
pub(crate) fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// Dot product with four independent accumulators so the FP adds pipeline.
/// Fixed-width chunks keep the hot loop free of bounds checks.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a[..n].chunks_exact(4);
    let mut cb = b[..n].chunks_exact(4);
    for (pa, pb) in (&mut ca).zip(&mut cb) {
        acc[0] += pa[0] * pb[0];
        acc[1] += pa[1] * pb[1];
        acc[2] += pa[2] * pb[2];
        acc[3] += pa[3] * pb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        s += xa * xb;
    }
    s
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use rand::Rng;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(values.to_vec(), shape).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, Role::InputNoise);
        let numel: usize = shape.iter().product();
        // Values in ±[0.2, 1.5]: away from the kinks of clamp/relu-style ops
        // so finite differences stay two-sided smooth.
        let values: Vec<f64> = (0..numel)
            .map(|_| {
                let mag = 0.2 + 1.3 * rng.gen::<f64>();
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::new(values, shape).unwrap()
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = tape.constant(t(&[1.0, 1.0], &[2, 1]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(y), &[3.0, 7.0]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn mean_of_three() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2.0, 4.0, 6.0], &[3]));
        let y = tape.mean(a).unwrap();
        assert_eq!(tape.values(y), &[4.0]);
    }

    #[test]
    fn log_rejects_non_positive_and_accepts_clamped() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[0.5, 0.0], &[2]));
        assert!(matches!(tape.log(a), Err(Error::InvalidArgument(_))));
        let c = tape.clamp_min(a, 1e-12).unwrap();
        let y = tape.log(c).unwrap();
        // ln(1e-12) = -12 ln(10)
        assert!((tape.values(y)[1] - (-27.631021115928547)).abs() < 1e-9);
        assert!((tape.values(y)[1] + 27.63).abs() < 0.01);
    }

    #[test]
    fn sum_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3.0], &[1]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_errors_until_new_op_recorded() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2.0], &[1]));
        let loss = tape.square(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardConsumed)));
        let loss2 = tape.square(loss).unwrap();
        tape.backward(loss2).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0], &[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0], &[1]));
        let unused = tape.param(t(&[5.0, 6.0], &[2]));
        let loss = tape.square(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4.0], &[1]));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn div_by_zero_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0], &[1]));
        let b = tape.constant(t(&[0.0], &[1]));
        assert!(tape.div(a, b).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        let a = rand_tensor(&[6], 1);
        let b = rand_tensor(&[6], 2);
        gradcheck::check(&[a.clone(), b.clone()], |t, p| {
            let y = t.add(p[0], p[1]).unwrap();
            t.sum(y).unwrap()
        }, 1e-4);
        gradcheck::check(&[a.clone(), b.clone()], |t, p| {
            let y = t.sub(p[0], p[1]).unwrap();
            let s = t.square(y).unwrap();
            t.sum(s).unwrap()
        }, 1e-4);
        gradcheck::check(&[a.clone(), b.clone()], |t, p| {
            let y = t.mul(p[0], p[1]).unwrap();
            t.sum(y).unwrap()
        }, 1e-4);
        gradcheck::check(&[a, b], |t, p| {
            let y = t.div(p[0], p[1]).unwrap();
            t.sum(y).unwrap()
        }, 1e-4);
    }

    #[test]
    fn gradcheck_scalar_broadcast() {
        let a = rand_tensor(&[5], 3);
        let s = rand_tensor(&[1], 4);
        for op in 0..4usize {
            gradcheck::check(&[a.clone(), s.clone()], move |t, p| {
                let y = match op {
                    0 => t.add(p[0], p[1]).unwrap(),
                    1 => t.sub(p[1], p[0]).unwrap(),
                    2 => t.mul(p[0], p[1]).unwrap(),
                    _ => t.div(p[0], p[1]).unwrap(),
                };
                let sq = t.square(y).unwrap();
                t.sum(sq).unwrap()
            }, 1e-4);
        }
    }

    #[test]
    fn gradcheck_unary_and_reductions() {
        let a = rand_tensor(&[7], 5);
        gradcheck::check(&[a.clone()], |t, p| {
            let n = t.neg(p[0]).unwrap();
            let s = t.square(n).unwrap();
            t.mean(s).unwrap()
        }, 1e-4);
        let pos = Tensor::new(a.values().iter().map(|v| v.abs() + 0.3).collect(), &[7]).unwrap();
        gradcheck::check(&[pos.clone()], |t, p| {
            let l = t.log(p[0]).unwrap();
            t.sum(l).unwrap()
        }, 1e-4);
        gradcheck::check(&[pos.clone()], |t, p| {
            let c = t.clamp_min(p[0], 0.9).unwrap();
            let s = t.square(c).unwrap();
            t.sum(s).unwrap()
        }, 1e-4);
        gradcheck::check(&[pos], |t, p| {
            let r = t.sqrt(p[0]).unwrap();
            t.sum(r).unwrap()
        }, 1e-4);
    }

    #[test]
    fn sqrt_values_and_negative_input() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[4.0, 9.0, 0.0], &[3]));
        let r = tape.sqrt(a).unwrap();
        assert_eq!(tape.values(r), &[2.0, 3.0, 0.0]);
        let neg = tape.constant(t(&[-1e-9], &[1]));
        assert!(tape.sqrt(neg).is_err());
    }

    #[test]
    fn gradcheck_matmul_reshape_concat() {
        let a = rand_tensor(&[3, 4], 6);
        let b = rand_tensor(&[4, 2], 7);
        gradcheck::check(&[a.clone(), b], |t, p| {
            let y = t.matmul(p[0], p[1]).unwrap();
            let s = t.square(y).unwrap();
            t.sum(s).unwrap()
        }, 1e-4);
        gradcheck::check(&[a.clone()], |t, p| {
            let r = t.reshape(p[0], &[2, 6]).unwrap();
            let s = t.square(r).unwrap();
            t.sum(s).unwrap()
        }, 1e-4);
        let c = rand_tensor(&[2, 4], 8);
        gradcheck::check(&[a, c], |t, p| {
            let y = t.concat(&[p[0], p[1]]).unwrap();
            let s = t.square(y).unwrap();
            t.sum(s).unwrap()
        }, 1e-4);
    }

    #[test]
    fn tape_determinism_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(rand_tensor(&[4, 4], 9));
            let y = tape.param(rand_tensor(&[4, 4], 10));
            let m = tape.matmul(x, y).unwrap();
            let s = tape.square(m).unwrap();
            let loss = tape.mean(s).unwrap();
            tape.backward(loss).unwrap();
            (tape.values(loss).to_vec(), tape.grad(x).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn linearity_of_backward() {
        // backward(a*f + b*g) == a*grad(f) + b*grad(g) on the shared parameter.
        let x0 = rand_tensor(&[5], 11);
        let grad_of = |with_f: f64, with_g: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let f = {
                let s = tape.square(x).unwrap();
                tape.sum(s).unwrap()
            };
            let g = {
                let n = tape.neg(x).unwrap();
                tape.mean(n).unwrap()
            };
            let cf = tape.constant(Tensor::scalar(with_f));
            let cg = tape.constant(Tensor::scalar(with_g));
            let tf = tape.mul(f, cf).unwrap();
            let tg = tape.mul(g, cg).unwrap();
            let loss = tape.add(tf, tg).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b) = (0.7, -2.3);
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_values_and_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0], &[1, 2]));
        let b = tape.constant(t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]));
        let y = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dot_and_axpy_agree_with_naive() {
        let a: Vec<f64> = (0..103).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..103).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-10);
        let mut y = vec![1.0; 103];
        axpy(0.5, &a, &mut y);
        for i in 0..103 {
            assert!((y[i] - (1.0 + 0.5 * a[i])).abs() < 1e-15);
        }
    }
}
