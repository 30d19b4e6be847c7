//! Reverse-mode autodiff over a recorded tape of operations.
//!
//! A [`Graph`] owns the tape; [`Var`] is a cheap handle to one recorded
//! value. Operations validate shapes, compute forward values eagerly, and
//! record what backward needs. The backward pass walks the tape once in
//! reverse, accumulating gradients additively, and a graph supports exactly
//! one backward pass. A graph is deliberately not `Sync`: it belongs to one
//! logical thread, while kernels may parallelize internally.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels;
use super::{Scalar, Tensor, TensorError, TensorResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Reduction flavor for [`Var::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op<T> {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    BiasAdd {
        x: usize,
        bias: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    MatVec {
        a: usize,
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    MaxPool3d {
        x: usize,
        argmax: Vec<usize>,
    },
    Reduce {
        kind: ReduceKind,
        x: usize,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: usize,
        inv_stds: Vec<T>,
    },
    Concat {
        xs: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Relu => "relu",
                UnaryKind::Abs => "abs",
                UnaryKind::Neg => "neg",
            },
            Op::Scale { .. } => "scale",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::BiasAdd { .. } => "bias_add",
            Op::MatMul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::MaxPool3d { .. } => "max_pool3d",
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "reduce_sum",
                ReduceKind::Mean => "reduce_mean",
                ReduceKind::Max => "reduce_max",
            },
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    stage: Rc<str>,
}

/// Tape of recorded operations for one forward/backward cycle.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<Vec<(String, usize)>>,
    stage: RefCell<Rc<str>>,
    backward_run: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    idx: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("idx", &self.idx).finish()
    }
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            stage: RefCell::new(Rc::from("")),
            backward_run: Cell::new(false),
        }
    }

    /// Labels subsequently recorded operations for numeric error reports.
    pub fn set_stage(&self, stage: &str) {
        *self.stage.borrow_mut() = Rc::from(stage);
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> TensorResult<Var<'_, T>> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input that never needs gradients.
    pub fn constant(&self, value: Tensor<T>) -> TensorResult<Var<'_, T>> {
        self.leaf(value, false)
    }

    /// Records a named trainable leaf once per graph; later calls with the
    /// same name return the existing handle, so shared parameters accumulate
    /// gradients across every use.
    pub fn bound_leaf(&self, name: &str, value: &Tensor<T>) -> TensorResult<Var<'_, T>> {
        if let Some(&(_, idx)) = self
            .bindings
            .borrow()
            .iter()
            .find(|(n, _)| n == name)
        {
            return Ok(Var { graph: self, idx });
        }
        let var = self.leaf(value.clone(), true)?;
        self.bindings.borrow_mut().push((name.to_string(), var.idx));
        Ok(var)
    }

    /// Gradient accumulated for a named leaf, if backward reached it.
    pub fn binding_grad(&self, name: &str) -> Option<Tensor<T>> {
        let idx = self
            .bindings
            .borrow()
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, idx)| idx)?;
        let nodes = self.nodes.borrow();
        let node = &nodes[idx];
        let grad = node.grad.as_ref()?;
        Some(Tensor::from_vec(node.value.shape(), grad.clone()).expect("grad matches value shape"))
    }

    /// Concatenates rank-1 values in order.
    pub fn concat<'g>(&'g self, xs: &[Var<'g, T>]) -> TensorResult<Var<'g, T>> {
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        let mut idxs = Vec::with_capacity(xs.len());
        let mut requires = false;
        for x in xs {
            self.check_owns(*x)?;
            let t = x.value();
            if t.rank() != 1 {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    detail: format!("expected rank 1, got shape {:?}", t.shape()),
                });
            }
            data.extend_from_slice(t.data());
            idxs.push(x.idx);
            requires |= x.requires_grad();
        }
        let out = Tensor::from_vec(&[data.len()], data)?;
        self.push(out, Op::Concat { xs: idxs }, requires)
    }

    /// Runs the single reverse pass from a scalar output, visiting each
    /// recorded operation exactly once in reverse order.
    pub fn backward(&self, loss: Var<'_, T>) -> TensorResult<()> {
        self.check_owns(loss)?;
        if self.backward_run.get() {
            return Err(TensorError::BackwardConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        {
            let ln = &nodes[loss.idx];
            if ln.value.numel() != 1 {
                return Err(TensorError::NotScalar {
                    shape: ln.value.shape().to_vec(),
                });
            }
            if !ln.requires_grad {
                return Err(TensorError::NoGrad);
            }
        }
        self.backward_run.set(true);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);
        for idx in (0..=loss.idx).rev() {
            if grads[idx].is_none() || !nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            let (before, rest) = nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: format!("backward of {}", node.op.name()),
                    stage: node.stage.to_string(),
                });
            }
            scatter(before, node, &g, &mut grads)?;
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Gradient stored on a value by [`Graph::backward`].
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.idx];
        let grad = node.grad.as_ref()?;
        Some(Tensor::from_vec(node.value.shape(), grad.clone()).expect("grad matches value shape"))
    }

    fn check_owns(&self, v: Var<'_, T>) -> TensorResult<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(TensorError::GraphMismatch)
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorResult<Var<'_, T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
                stage: self.stage.borrow().to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            stage: Rc::clone(&self.stage.borrow()),
        });
        Ok(Var { graph: self, idx })
    }
}

/// Accumulates `delta` into a gradient slot, creating zeros on first touch.
fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn scatter<T: Scalar>(
    before: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> TensorResult<()> {
    let needs = |i: usize| before[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Unary { kind, x } => {
            if needs(*x) {
                let xin = before[*x].value.data();
                let y = node.value.data();
                let dst = slot(grads, *x, xin.len());
                match kind {
                    UnaryKind::Sigmoid => {
                        for i in 0..y.len() {
                            dst[i] += g[i] * y[i] * (T::one() - y[i]);
                        }
                    }
                    UnaryKind::Tanh => {
                        for i in 0..y.len() {
                            dst[i] += g[i] * (T::one() - y[i] * y[i]);
                        }
                    }
                    UnaryKind::Relu => {
                        for i in 0..y.len() {
                            if xin[i] > T::zero() {
                                dst[i] += g[i];
                            }
                        }
                    }
                    UnaryKind::Abs => {
                        for i in 0..y.len() {
                            if xin[i] > T::zero() {
                                dst[i] += g[i];
                            } else if xin[i] < T::zero() {
                                dst[i] -= g[i];
                            }
                        }
                    }
                    UnaryKind::Neg => {
                        for i in 0..y.len() {
                            dst[i] -= g[i];
                        }
                    }
                }
            }
        }
        Op::Scale { x, c } => {
            if needs(*x) {
                let dst = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dst[i] += g[i] * *c;
                }
            }
        }
        Op::Binary { kind, a, b } => {
            let (av, bv) = (before[*a].value.data(), before[*b].value.data());
            if needs(*a) {
                let dst = slot(grads, *a, av.len());
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        for i in 0..g.len() {
                            dst[i] += g[i];
                        }
                    }
                    BinaryKind::Mul => {
                        for i in 0..g.len() {
                            dst[i] += g[i] * bv[i];
                        }
                    }
                }
            }
            if needs(*b) {
                let dst = slot(grads, *b, bv.len());
                match kind {
                    BinaryKind::Add => {
                        for i in 0..g.len() {
                            dst[i] += g[i];
                        }
                    }
                    BinaryKind::Sub => {
                        for i in 0..g.len() {
                            dst[i] -= g[i];
                        }
                    }
                    BinaryKind::Mul => {
                        for i in 0..g.len() {
                            dst[i] += g[i] * av[i];
                        }
                    }
                }
            }
        }
        Op::BiasAdd { x, bias } => {
            if needs(*x) {
                let dst = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dst[i] += g[i];
                }
            }
            if needs(*bias) {
                let blen = before[*bias].value.numel();
                let dst = slot(grads, *bias, blen);
                for i in 0..g.len() {
                    dst[i % blen] += g[i];
                }
            }
        }
        Op::MatMul { a, b } => {
            let (at, bt) = (&before[*a].value, &before[*b].value);
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[1];
            if needs(*a) {
                let da = kernels::mm_nt(g, bt.data(), m, n, k);
                add_assign(slot(grads, *a, da.len()), &da);
            }
            if needs(*b) {
                let db = kernels::mm_tn(at.data(), g, k, m, n);
                add_assign(slot(grads, *b, db.len()), &db);
            }
        }
        Op::MatVec { a, x } => {
            let (at, xt) = (&before[*a].value, &before[*x].value);
            let (m, k) = (at.shape()[0], at.shape()[1]);
            if needs(*a) {
                let dst = slot(grads, *a, m * k);
                for i in 0..m {
                    for p in 0..k {
                        dst[i * k + p] += g[i] * xt.data()[p];
                    }
                }
            }
            if needs(*x) {
                let dst = slot(grads, *x, k);
                for i in 0..m {
                    for p in 0..k {
                        dst[p] += at.data()[i * k + p] * g[i];
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xt, wt) = (&before[*x].value, &before[*w].value);
            let xs = [xt.shape()[0], xt.shape()[1], xt.shape()[2]];
            let ws = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
            let os = [
                node.value.shape()[0],
                node.value.shape()[1],
                node.value.shape()[2],
            ];
            let (dx, dw) =
                kernels::conv2d_backward(xt.data(), xs, wt.data(), ws, *stride, *pad, g, os);
            if needs(*x) {
                add_assign(slot(grads, *x, dx.len()), &dx);
            }
            if needs(*w) {
                add_assign(slot(grads, *w, dw.len()), &dw);
            }
        }
        Op::Conv3d { x, w, stride, pad } => {
            let (xt, wt) = (&before[*x].value, &before[*w].value);
            let xs = [
                xt.shape()[0],
                xt.shape()[1],
                xt.shape()[2],
                xt.shape()[3],
            ];
            let ws = [
                wt.shape()[0],
                wt.shape()[1],
                wt.shape()[2],
                wt.shape()[3],
                wt.shape()[4],
            ];
            let os = [
                node.value.shape()[0],
                node.value.shape()[1],
                node.value.shape()[2],
                node.value.shape()[3],
            ];
            let (dx, dw) =
                kernels::conv3d_backward(xt.data(), xs, wt.data(), ws, *stride, *pad, g, os);
            if needs(*x) {
                add_assign(slot(grads, *x, dx.len()), &dx);
            }
            if needs(*w) {
                add_assign(slot(grads, *w, dw.len()), &dw);
            }
        }
        Op::MaxPool2d { x, argmax } | Op::MaxPool3d { x, argmax } => {
            if needs(*x) {
                let xlen = before[*x].value.numel();
                let dst = slot(grads, *x, xlen);
                for (oi, &xi) in argmax.iter().enumerate() {
                    dst[xi] += g[oi];
                }
            }
        }
        Op::Reduce {
            kind,
            x,
            axes,
            argmax,
        } => {
            if needs(*x) {
                let xt = &before[*x].value;
                let dst = slot(grads, *x, xt.numel());
                match kind {
                    ReduceKind::Max => {
                        for (oi, &xi) in argmax.iter().enumerate() {
                            dst[xi] += g[oi];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        if axes.is_empty() {
                            add_assign(dst, g);
                        } else {
                            let map = kernels::ReduceMap::new(xt.shape(), axes);
                            let scale = if *kind == ReduceKind::Mean {
                                T::from_usize(map.group).recip()
                            } else {
                                T::one()
                            };
                            for i in 0..xt.numel() {
                                dst[i] += g[map.out_index(i)] * scale;
                            }
                        }
                    }
                }
            }
        }
        Op::InstanceNorm { x, inv_stds } => {
            if needs(*x) {
                let channels = node.value.shape()[0];
                let dx =
                    kernels::instance_norm_backward(node.value.data(), g, channels, inv_stds);
                add_assign(slot(grads, *x, dx.len()), &dx);
            }
        }
        Op::Concat { xs } => {
            let mut offset = 0usize;
            for &xi in xs {
                let len = before[xi].value.numel();
                if needs(xi) {
                    let dst = slot(grads, xi, len);
                    add_assign(dst, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::Reshape { x } => {
            if needs(*x) {
                add_assign(slot(grads, *x, g.len()), g);
            }
        }
    }
    Ok(())
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Tensor<T> {
        self.graph.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.idx].requires_grad
    }

    fn unary(self, kind: UnaryKind) -> TensorResult<Var<'g, T>> {
        let x = self.value();
        let data = match kind {
            UnaryKind::Sigmoid => x
                .data()
                .iter()
                .map(|&v| (T::one() + (-v).exp()).recip())
                .collect(),
            UnaryKind::Tanh => x.data().iter().map(|&v| v.tanh()).collect(),
            UnaryKind::Relu => x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            UnaryKind::Abs => x.data().iter().map(|&v| v.abs()).collect(),
            UnaryKind::Neg => x.data().iter().map(|&v| -v).collect(),
        };
        let out = Tensor::from_vec(x.shape(), data)?;
        self.graph
            .push(out, Op::Unary { kind, x: self.idx }, self.requires_grad())
    }

    pub fn sigmoid(self) -> TensorResult<Var<'g, T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> TensorResult<Var<'g, T>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn relu(self) -> TensorResult<Var<'g, T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn abs(self) -> TensorResult<Var<'g, T>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn neg(self) -> TensorResult<Var<'g, T>> {
        self.unary(UnaryKind::Neg)
    }

    /// Multiplies by a compile-time constant; the constant gets no gradient.
    pub fn scale(self, c: T) -> TensorResult<Var<'g, T>> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.graph
            .push(out, Op::Scale { x: self.idx, c }, self.requires_grad())
    }

    fn binary(self, rhs: Var<'g, T>, kind: BinaryKind, op: &'static str) -> TensorResult<Var<'g, T>> {
        self.graph.check_owns(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        self.graph.push(
            out,
            Op::Binary {
                kind,
                a: self.idx,
                b: rhs.idx,
            },
            self.requires_grad() || rhs.requires_grad(),
        )
    }

    /// Elementwise sum. As the one exception to strict shape equality, a
    /// rank-1 right operand matching the trailing dimension is broadcast
    /// across the leading dimensions (bias addition).
    pub fn add(self, rhs: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        self.graph.check_owns(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape() == b.shape() {
            return self.binary(rhs, BinaryKind::Add, "add");
        }
        if b.rank() == 1 && a.rank() >= 1 && a.shape()[a.rank() - 1] == b.numel() {
            let blen = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.data()[i % blen])
                .collect();
            let out = Tensor::from_vec(a.shape(), data)?;
            return self.graph.push(
                out,
                Op::BiasAdd {
                    x: self.idx,
                    bias: rhs.idx,
                },
                self.requires_grad() || rhs.requires_grad(),
            );
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }

    pub fn sub(self, rhs: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    /// Hadamard product.
    pub fn mul(self, rhs: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        self.graph.check_owns(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::mm_nn(a.data(), b.data(), m, k, n);
        let out = Tensor::from_vec(&[m, n], data)?;
        self.graph.push(
            out,
            Op::MatMul {
                a: self.idx,
                b: rhs.idx,
            },
            self.requires_grad() || rhs.requires_grad(),
        )
    }

    /// `[m,k] x [k] -> [m]`.
    pub fn matvec(self, rhs: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        self.graph.check_owns(rhs)?;
        let (a, x) = (self.value(), rhs.value());
        if a.rank() != 2 || x.rank() != 1 || a.shape()[1] != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                left: a.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![T::zero(); m];
        for i in 0..m {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a.data()[i * k + p] * x.data()[p];
            }
            data[i] = acc;
        }
        let out = Tensor::from_vec(&[m], data)?;
        self.graph.push(
            out,
            Op::MatVec {
                a: self.idx,
                x: rhs.idx,
            },
            self.requires_grad() || rhs.requires_grad(),
        )
    }

    /// Cross-correlation of `[c_in,h,w]` with weights `[c_out,c_in,kh,kw]`.
    pub fn conv2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> TensorResult<Var<'g, T>> {
        self.graph.check_owns(weight)?;
        let (x, w) = (self.value(), weight.value());
        if stride == 0 {
            return Err(TensorError::InvalidArg {
                arg: "stride",
                detail: "must be at least 1".into(),
            });
        }
        if x.rank() != 3 || w.rank() != 4 || w.shape()[1] != x.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let xs = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let ws = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        if ws[2] > xs[1] + 2 * pad || ws[3] > xs[2] + 2 * pad {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!(
                    "kernel {:?} larger than padded input {:?} (pad {pad})",
                    &ws[2..],
                    &xs[1..]
                ),
            });
        }
        let (data, os) = kernels::conv2d(x.data(), xs, w.data(), ws, stride, pad);
        let out = Tensor::from_vec(&os, data)?;
        self.graph.push(
            out,
            Op::Conv2d {
                x: self.idx,
                w: weight.idx,
                stride,
                pad,
            },
            self.requires_grad() || weight.requires_grad(),
        )
    }

    /// Cross-correlation of `[c_in,d,h,w]` with weights `[c_out,c_in,kd,kh,kw]`.
    pub fn conv3d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> TensorResult<Var<'g, T>> {
        self.graph.check_owns(weight)?;
        let (x, w) = (self.value(), weight.value());
        if stride == 0 {
            return Err(TensorError::InvalidArg {
                arg: "stride",
                detail: "must be at least 1".into(),
            });
        }
        if x.rank() != 4 || w.rank() != 5 || w.shape()[1] != x.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let xs = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let ws = [
            w.shape()[0],
            w.shape()[1],
            w.shape()[2],
            w.shape()[3],
            w.shape()[4],
        ];
        if ws[2] > xs[1] + 2 * pad || ws[3] > xs[2] + 2 * pad || ws[4] > xs[3] + 2 * pad {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                detail: format!(
                    "kernel {:?} larger than padded input {:?} (pad {pad})",
                    &ws[2..],
                    &xs[1..]
                ),
            });
        }
        let (data, os) = kernels::conv3d(x.data(), xs, w.data(), ws, stride, pad);
        let out = Tensor::from_vec(&os, data)?;
        self.graph.push(
            out,
            Op::Conv3d {
                x: self.idx,
                w: weight.idx,
                stride,
                pad,
            },
            self.requires_grad() || weight.requires_grad(),
        )
    }

    /// Square-window max pooling over `[c,h,w]`; gradient routes to the
    /// first maximum of each window.
    pub fn max_pool2d(self, k: usize, stride: usize, pad: usize) -> TensorResult<Var<'g, T>> {
        let x = self.value();
        pool_args_ok(k, stride, pad)?;
        if x.rank() != 3 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                detail: format!("expected rank 3, got shape {:?}", x.shape()),
            });
        }
        let xs = [x.shape()[0], x.shape()[1], x.shape()[2]];
        if k > xs[1] + 2 * pad || k > xs[2] + 2 * pad {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                detail: format!("window {k} larger than padded input {:?}", &xs[1..]),
            });
        }
        let (data, os, argmax) = kernels::max_pool2d(x.data(), xs, k, stride, pad);
        let out = Tensor::from_vec(&os, data)?;
        self.graph.push(
            out,
            Op::MaxPool2d {
                x: self.idx,
                argmax,
            },
            self.requires_grad(),
        )
    }

    /// Cubic-window max pooling over `[c,d,h,w]`.
    pub fn max_pool3d(self, k: usize, stride: usize, pad: usize) -> TensorResult<Var<'g, T>> {
        let x = self.value();
        pool_args_ok(k, stride, pad)?;
        if x.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "max_pool3d",
                detail: format!("expected rank 4, got shape {:?}", x.shape()),
            });
        }
        let xs = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if k > xs[1] + 2 * pad || k > xs[2] + 2 * pad || k > xs[3] + 2 * pad {
            return Err(TensorError::InvalidShape {
                op: "max_pool3d",
                detail: format!("window {k} larger than padded input {:?}", &xs[1..]),
            });
        }
        let (data, os, argmax) = kernels::max_pool3d(x.data(), xs, k, stride, pad);
        let out = Tensor::from_vec(&os, data)?;
        self.graph.push(
            out,
            Op::MaxPool3d {
                x: self.idx,
                argmax,
            },
            self.requires_grad(),
        )
    }

    /// Per-channel normalization of `[c, spatial...]` to zero mean and unit
    /// population variance with `eps` inside the square root.
    pub fn instance_norm(self, eps: T) -> TensorResult<Var<'g, T>> {
        let x = self.value();
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(TensorError::InvalidArg {
                arg: "eps",
                detail: "must be positive and finite".into(),
            });
        }
        if x.rank() < 2 {
            return Err(TensorError::InvalidShape {
                op: "instance_norm",
                detail: format!(
                    "expected [channels, spatial...], got shape {:?}",
                    x.shape()
                ),
            });
        }
        let channels = x.shape()[0];
        let (data, _means, inv_stds) = kernels::instance_norm(x.data(), channels, eps);
        let out = Tensor::from_vec(x.shape(), data)?;
        self.graph.push(
            out,
            Op::InstanceNorm {
                x: self.idx,
                inv_stds,
            },
            self.requires_grad(),
        )
    }

    /// Reduces over `axes` (dropped from the shape). An empty axis list is
    /// the identity. Max reduction routes gradient to the first maximum.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> TensorResult<Var<'g, T>> {
        let x = self.value();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        for pair in axes.windows(2) {
            if pair[0] == pair[1] {
                return Err(TensorError::InvalidArg {
                    arg: "axes",
                    detail: format!("duplicate axis {}", pair[0]),
                });
            }
        }
        for &a in &axes {
            if a >= x.rank() {
                return Err(TensorError::InvalidAxis {
                    axis: a,
                    rank: x.rank(),
                });
            }
        }
        if axes.is_empty() {
            let out = x.clone();
            return self.graph.push(
                out,
                Op::Reduce {
                    kind,
                    x: self.idx,
                    axes,
                    argmax: Vec::new(),
                },
                self.requires_grad(),
            );
        }
        let map = kernels::ReduceMap::new(x.shape(), &axes);
        let out_numel: usize = map.out_shape.iter().product::<usize>().max(1);
        let mut data;
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                data = vec![T::zero(); out_numel];
                for (i, &v) in x.data().iter().enumerate() {
                    data[map.out_index(i)] += v;
                }
                if kind == ReduceKind::Mean {
                    let scale = T::from_usize(map.group).recip();
                    for v in &mut data {
                        *v *= scale;
                    }
                }
            }
            ReduceKind::Max => {
                data = vec![T::neg_infinity(); out_numel];
                argmax = vec![usize::MAX; out_numel];
                for (i, &v) in x.data().iter().enumerate() {
                    let oi = map.out_index(i);
                    if v > data[oi] || argmax[oi] == usize::MAX {
                        data[oi] = v;
                        argmax[oi] = i;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&map.out_shape, data)?;
        self.graph.push(
            out,
            Op::Reduce {
                kind,
                x: self.idx,
                axes,
                argmax,
            },
            self.requires_grad(),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> TensorResult<Var<'g, T>> {
        let rank = self.value().rank();
        self.reduce(ReduceKind::Sum, &(0..rank).collect::<Vec<_>>())
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(self) -> TensorResult<Var<'g, T>> {
        let rank = self.value().rank();
        self.reduce(ReduceKind::Mean, &(0..rank).collect::<Vec<_>>())
    }

    /// Same elements under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> TensorResult<Var<'g, T>> {
        let out = self.value().reshaped(shape)?;
        self.graph
            .push(out, Op::Reshape { x: self.idx }, self.requires_grad())
    }
}

fn pool_args_ok(k: usize, stride: usize, pad: usize) -> TensorResult<()> {
    if k == 0 {
        return Err(TensorError::InvalidArg {
            arg: "kernel",
            detail: "must be at least 1".into(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArg {
            arg: "stride",
            detail: "must be at least 1".into(),
        });
    }
    if pad >= k {
        return Err(TensorError::InvalidArg {
            arg: "pad",
            detail: format!("pad {pad} must be smaller than window {k}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_case() {
        let g = Graph::new();
        let a = g.leaf(t64(&[1, 2], &[1.0, 2.0]), false).unwrap();
        let b = g.leaf(t64(&[2, 1], &[3.0, 4.0]), false).unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().shape(), &[1, 1]);
        assert_eq!(c.value().data(), &[11.0]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let g = Graph::new();
        let a = g
            .leaf(t64(&[2, 2], &[1.5, -2.0, 0.25, 4.0]), false)
            .unwrap();
        let eye = g.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false).unwrap();
        let c = a.matmul(eye).unwrap();
        assert_eq!(c.value().data(), a.value().data());
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        assert!(matches!(
            a.matmul(b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn sigmoid_of_one() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1], &[1.0]), false).unwrap();
        let y = x.sigmoid().unwrap();
        assert!((y.value().data()[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn relu_clamps_negatives_and_blocks_their_gradient() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[-3.0, 2.0]), true).unwrap();
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0]);
        let s = y.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_backward_is_ones() {
        let g = Graph::new();
        let x = g.leaf(t64(&[3], &[1.0, -2.0, 5.0]), true).unwrap();
        let s = x.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn hadamard_square_backward_doubles_input() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        let s = x.mul(x).unwrap().sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_across_shared_uses() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[3.0, -1.0]), true).unwrap();
        // x + x + x => gradient 3 per element.
        let s = x.add(x).unwrap().add(x).unwrap().sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn reduce_mean_and_max_examples() {
        let g = Graph::new();
        let x = g.leaf(t64(&[3], &[1.0, 2.0, 3.0]), false).unwrap();
        assert_eq!(
            x.reduce(ReduceKind::Mean, &[0]).unwrap().value().data(),
            &[2.0]
        );
        let m = g
            .leaf(t64(&[2, 2], &[1.0, 5.0, 7.0, 2.0]), true)
            .unwrap();
        let row_max = m.reduce(ReduceKind::Max, &[1]).unwrap();
        assert_eq!(row_max.value().shape(), &[2]);
        assert_eq!(row_max.value().data(), &[5.0, 7.0]);
        let s = row_max.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(m).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_with_empty_axes_is_identity() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[4.0, 5.0]), true).unwrap();
        let y = x.reduce(ReduceKind::Sum, &[]).unwrap();
        assert_eq!(y.value().data(), &[4.0, 5.0]);
        let s = y.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn reduce_rejects_bad_axes() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), false).unwrap();
        assert!(matches!(
            x.reduce(ReduceKind::Sum, &[2]),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
        assert!(x.reduce(ReduceKind::Sum, &[0, 0]).is_err());
    }

    #[test]
    fn conv2d_hand_case() {
        let g = Graph::new();
        let x = g
            .leaf(t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false)
            .unwrap();
        let w = g
            .leaf(t64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false)
            .unwrap();
        let y = x.conv2d(w, 1, 0).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 1]);
        assert_eq!(y.value().data(), &[5.0]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 3]), false).unwrap();
        let w = g.leaf(Tensor::zeros(&[1, 1, 5, 5]), false).unwrap();
        assert!(matches!(
            x.conv2d(w, 1, 0),
            Err(TensorError::InvalidShape { op: "conv2d", .. })
        ));
        // Padding can make the same kernel legal.
        let w2 = g.leaf(Tensor::zeros(&[1, 1, 5, 5]), false).unwrap();
        assert!(x.conv2d(w2, 1, 1).is_ok());
    }

    #[test]
    fn max_pool2d_routes_gradient_to_first_maximum() {
        let g = Graph::new();
        let x = g
            .leaf(t64(&[1, 2, 2], &[1.0, 7.0, 7.0, 2.0]), true)
            .unwrap();
        let y = x.max_pool2d(2, 2, 0).unwrap();
        assert_eq!(y.value().data(), &[7.0]);
        let s = y.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn instance_norm_matches_direct_formula() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1, 3], &[1.0, 2.0, 3.0]), false).unwrap();
        let eps = 1e-5;
        let y = x.instance_norm(eps).unwrap();
        let var: f64 = 2.0 / 3.0;
        let expect: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .map(|v| (v - 2.0) / (var + eps).sqrt())
            .collect();
        for (got, want) in y.value().data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((expect[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn bias_add_broadcasts_over_leading_dims_only() {
        let g = Graph::new();
        let x = g
            .leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true)
            .unwrap();
        let b = g.leaf(t64(&[2], &[10.0, 20.0]), true).unwrap();
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = y.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);

        let g2 = Graph::<f64>::new();
        let x2 = g2.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let b2 = g2.leaf(Tensor::zeros(&[2]), false).unwrap();
        assert!(matches!(
            x2.add(b2),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn concat_splits_gradient() {
        let g = Graph::new();
        let a = g.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        let b = g.leaf(t64(&[1], &[3.0]), true).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        let s = c.scale(2.0).unwrap().sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_requires_grad() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1], &[1.0]), false).unwrap();
        let s = x.sum_all().unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::NoGrad);
    }

    #[test]
    fn second_backward_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1], &[1.0]), true).unwrap();
        let s = x.sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::BackwardConsumed);
    }

    #[test]
    fn nan_input_is_rejected_at_the_leaf() {
        let g = Graph::<f64>::new();
        let err = g
            .leaf(Tensor::from_vec(&[1], vec![f64::NAN]).unwrap(), true)
            .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn mixing_graphs_is_rejected() {
        let g1 = Graph::<f64>::new();
        let g2 = Graph::<f64>::new();
        let a = g1.leaf(Tensor::zeros(&[1]), false).unwrap();
        let b = g2.leaf(Tensor::zeros(&[1]), false).unwrap();
        assert_eq!(a.add(b).unwrap_err(), TensorError::GraphMismatch);
    }

    #[test]
    fn bound_leaf_reuses_the_same_node_and_accumulates() {
        let g = Graph::new();
        let w = t64(&[1], &[2.0]);
        let a = g.bound_leaf("w", &w).unwrap();
        let b = g.bound_leaf("w", &w).unwrap();
        assert_eq!(g.len(), 1);
        // w + w*w: d/dw = 1 + 2w = 5.
        let s = a.add(b.mul(b).unwrap()).unwrap().sum_all().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.binding_grad("w").unwrap().data(), &[5.0]);
        assert_eq!(a.idx, b.idx);
    }

    #[test]
    fn forward_and_gradients_are_deterministic() {
        let run = || {
            let g = Graph::new();
            let x = g
                .leaf(
                    Tensor::from_fn(&[2, 5, 5], |i| ((i * 37 % 11) as f64 - 5.0) * 0.3),
                    true,
                )
                .unwrap();
            let w = g
                .leaf(
                    Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17 % 7) as f64 - 3.0) * 0.2),
                    true,
                )
                .unwrap();
            let y = x.conv2d(w, 2, 1).unwrap();
            let z = y.instance_norm(1e-5).unwrap().relu().unwrap();
            let s = z.mean_all().unwrap();
            g.backward(s).unwrap();
            (
                s.value().data().to_vec(),
                g.grad(x).unwrap().data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        let (s1, gx1, gw1) = run();
        let (s2, gx2, gw2) = run();
        assert_eq!(s1, s2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
