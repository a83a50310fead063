//! Dense multi-axis `f64` arrays with reverse-mode automatic differentiation.
//!
//! Tensors are handles onto reference-counted graph nodes. Building an op
//! records its inputs; calling [`Tensor::backward`] on a scalar walks the
//! graph in reverse topological order and accumulates gradients into every
//! `requires_grad` leaf. Gradients keep accumulating across backward calls
//! until [`Tensor::zero_grad`] resets them.
//!
//! Broadcasting is deliberately narrow: elementwise add/mul accept a
//! right-or-left operand that is either a scalar (one element) or whose shape
//! equals a trailing suffix of the other operand's shape (expansion over
//! leading axes). Anything else is a shape error.

mod gradcheck;

pub use gradcheck::grad_check;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Hook for primitive ops defined outside this module (layer norm, pooling,
/// CTC). The implementor captures whatever forward state it needs and returns
/// one gradient buffer per parent, in the parent order given to
/// [`Tensor::custom`].
pub trait CustomGrad {
    fn name(&self) -> &'static str;
    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

enum Op {
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Unary(Tensor, UnaryKind),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Transpose(Tensor, usize, usize),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    Softmax(Tensor, usize),
    Custom {
        parents: Vec<Tensor>,
        grad: Box<dyn CustomGrad>,
    },
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
    backward_done: Cell<bool>,
}

/// Handle onto one graph node. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    fn node(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                op,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Create a leaf tensor. Errors when `values` does not match the shape.
    pub fn from_vec(
        shape: impl Into<Vec<usize>>,
        values: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "create",
                detail: format!("zero-length axis in {shape:?}"),
            });
        }
        if numel(&shape) != values.len() {
            return Err(Error::Shape {
                op: "create",
                detail: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    numel(&shape),
                    values.len()
                ),
            });
        }
        Ok(Tensor::node(shape, values, requires_grad, None))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::node(shape, vec![0.0; n], false, None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Tensor {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::node(shape, vec![v; n], false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::node(vec![1], vec![v], false, None)
    }

    /// Leaf filled with draws from `U(lo, hi)`.
    pub fn rand_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
        requires_grad: bool,
    ) -> Tensor {
        let shape = shape.into();
        let n = numel(&shape);
        let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::node(shape, values, requires_grad, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Scalar extraction; panics on non-scalar (programming error).
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.values.borrow()[0]
    }

    /// Overwrite a leaf's values in place. Intended for optimizer updates
    /// between steps, never for tensors already wired into a live graph.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_values",
                detail: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        self.inner.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replace the accumulated gradient (used by gradient clipping and when
    /// restoring optimizer state).
    pub fn set_grad(&self, g: &[f64]) {
        assert_eq!(g.len(), self.numel(), "set_grad length mismatch");
        *self.inner.grad.borrow_mut() = Some(g.to_vec());
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    fn parents(&self) -> Vec<Tensor> {
        match &self.inner.op {
            None => Vec::new(),
            Some(op) => match op {
                Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                    vec![a.clone(), b.clone()]
                }
                Op::Unary(a, _)
                | Op::Scale(a, _)
                | Op::AddScalar(a)
                | Op::Sum(a)
                | Op::Mean(a)
                | Op::Transpose(a, _, _)
                | Op::Reshape(a)
                | Op::Slice { x: a, .. }
                | Op::Softmax(a, _) => vec![a.clone()],
                Op::Concat(parts, _) => parts.clone(),
                Op::Custom { parents, .. } => parents.clone(),
            },
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, values) = broadcast_zip("add", self, other, |a, b| a + b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::node(
            shape,
            values,
            rg,
            Some(Op::Add(self.clone(), other.clone())),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, values) = broadcast_zip("mul", self, other, |a, b| a * b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::node(
            shape,
            values,
            rg,
            Some(Op::Mul(self.clone(), other.clone())),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v * c).collect();
        Tensor::node(
            self.shape().to_vec(),
            values,
            self.requires_grad(),
            Some(Op::Scale(self.clone(), c)),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v + c).collect();
        Tensor::node(
            self.shape().to_vec(),
            values,
            self.requires_grad(),
            Some(Op::AddScalar(self.clone())),
        )
    }

    fn unary(&self, kind: UnaryKind) -> Result<Tensor> {
        if kind == UnaryKind::Log {
            if let Some(bad) = self.values().iter().find(|v| **v <= 0.0) {
                return Err(Error::InvalidValue {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let values = self
            .values()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
            })
            .collect();
        Ok(Tensor::node(
            self.shape().to_vec(),
            values,
            self.requires_grad(),
            Some(Op::Unary(self.clone(), kind)),
        ))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::Relu).expect("relu is total")
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Log)
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        Tensor::node(
            vec![1],
            vec![total],
            self.requires_grad(),
            Some(Op::Sum(self.clone())),
        )
    }

    pub fn mean(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        let n = self.numel() as f64;
        Tensor::node(
            vec![1],
            vec![total / n],
            self.requires_grad(),
            Some(Op::Mean(self.clone())),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?} changes element count", self.shape(), shape),
            });
        }
        Ok(Tensor::node(
            shape,
            self.to_vec(),
            self.requires_grad(),
            Some(Op::Reshape(self.clone())),
        ))
    }

    /// Swap two axes, materializing the permuted layout.
    pub fn transpose(&self, ax1: usize, ax2: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("axes ({ax1},{ax2}) out of range for rank {rank}"),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(ax1, ax2);
        let values = permute_swap(&self.values(), self.shape(), ax1, ax2);
        Ok(Tensor::node(
            out_shape,
            values,
            self.requires_grad(),
            Some(Op::Transpose(self.clone(), ax1, ax2)),
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || end > self.shape()[axis] || start >= end {
            return Err(Error::Shape {
                op: "slice",
                detail: format!(
                    "range {start}..{end} on axis {axis} of shape {:?}",
                    self.shape()
                ),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = end - start;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let len = self.shape()[axis];
        let vals = self.values();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&vals[base..base + (end - start) * inner]);
        }
        drop(vals);
        Ok(Tensor::node(
            out_shape,
            out,
            self.requires_grad(),
            Some(Op::Slice {
                x: self.clone(),
                axis,
                start,
            }),
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for p in parts {
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .zip(parts[0].shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("incompatible shapes {:?} vs {:?}", p.shape(), parts[0].shape()),
                });
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        let vals: Vec<_> = parts.iter().map(|p| p.values()).collect();
        for o in 0..outer {
            for (p, v) in parts.iter().zip(&vals) {
                let l = p.shape()[axis];
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        drop(vals);
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::node(
            out_shape,
            out,
            rg,
            Some(Op::Concat(parts.to_vec(), axis)),
        ))
    }

    // ---- matmul / softmax ----

    /// Matrix product over the trailing two axes. Leading axes must match
    /// exactly, or one operand may be rank 2 and is then broadcast across the
    /// other's leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n, a_batched, b_batched) = matmul_dims(self.shape(), other.shape())?;
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = if a_batched { bi * m * k } else { 0 };
            let bb = if b_batched { bi * k * n } else { 0 };
            gemm(
                &a[ab..ab + m * k],
                &b[bb..bb + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        drop(a);
        drop(b);
        let lead = if a_batched {
            self.shape()[..self.shape().len() - 2].to_vec()
        } else {
            other.shape()[..other.shape().len() - 2].to_vec()
        };
        let mut out_shape = lead;
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::node(
            out_shape,
            out,
            rg,
            Some(Op::Matmul(self.clone(), other.clone())),
        ))
    }

    /// Numerically stabilized softmax along `axis`; slices sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let vals = self.values();
        let mut out = vec![0.0; vals.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(vals[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (vals[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= z;
                }
            }
        }
        drop(vals);
        Ok(Tensor::node(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Some(Op::Softmax(self.clone(), axis)),
        ))
    }

    /// Install an externally computed primitive with its own gradient rule.
    pub fn custom(
        parents: Vec<Tensor>,
        shape: Vec<usize>,
        values: Vec<f64>,
        grad: Box<dyn CustomGrad>,
    ) -> Tensor {
        let rg = parents.iter().any(|p| p.requires_grad());
        Tensor::node(shape, values, rg, Some(Op::Custom { parents, grad }))
    }

    // ---- autodiff ----

    /// Reverse-mode sweep from a scalar. Accumulates into every
    /// `requires_grad` leaf reachable from this node.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if self.inner.backward_done.get() {
            return Err(Error::RepeatedBackward);
        }
        self.inner.backward_done.set(true);
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if node.is_leaf() {
                node.accumulate_grad(&g);
                continue;
            }
            node.backprop_into(&g, &mut grads);
        }
        Ok(())
    }

    fn backprop_into(&self, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        let mut send = |t: &Tensor, delta: Vec<f64>| {
            debug_assert_eq!(delta.len(), t.numel());
            match grads.entry(t.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&delta) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(delta);
                }
            }
        };
        match self.inner.op.as_ref().expect("non-leaf") {
            Op::Add(a, b) => {
                if a.requires_grad() {
                    send(a, reduce_to_operand(g, a.numel()));
                }
                if b.requires_grad() {
                    send(b, reduce_to_operand(g, b.numel()));
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let prod = bcast_product(g, &b.values(), a.numel());
                    send(a, prod);
                }
                if b.requires_grad() {
                    let prod = bcast_product(g, &a.values(), b.numel());
                    send(b, prod);
                }
            }
            Op::Matmul(a, b) => {
                let (batch, m, k, n, a_batched, b_batched) =
                    matmul_dims(a.shape(), b.shape()).expect("checked in forward");
                if a.requires_grad() {
                    let bv = b.values();
                    let mut da = vec![0.0; a.numel()];
                    for bi in 0..batch {
                        let ab = if a_batched { bi * m * k } else { 0 };
                        let bb = if b_batched { bi * k * n } else { 0 };
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bb..bb + k * n],
                            &mut da[ab..ab + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(a, da);
                }
                if b.requires_grad() {
                    let av = a.values();
                    let mut db = vec![0.0; b.numel()];
                    for bi in 0..batch {
                        let ab = if a_batched { bi * m * k } else { 0 };
                        let bb = if b_batched { bi * k * n } else { 0 };
                        gemm_tn(
                            &av[ab..ab + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bb..bb + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(b, db);
                }
            }
            Op::Unary(a, kind) => {
                if a.requires_grad() {
                    let out = self.values();
                    let da: Vec<f64> = match kind {
                        UnaryKind::Tanh => g
                            .iter()
                            .zip(out.iter())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                        UnaryKind::Sigmoid => g
                            .iter()
                            .zip(out.iter())
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(out.iter())
                            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryKind::Exp => g.iter().zip(out.iter()).map(|(g, y)| g * y).collect(),
                        UnaryKind::Log => {
                            let x = a.values();
                            g.iter().zip(x.iter()).map(|(g, x)| g / x).collect()
                        }
                    };
                    send(a, da);
                }
            }
            Op::Scale(a, c) => {
                if a.requires_grad() {
                    send(a, g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    send(a, g.to_vec());
                }
            }
            Op::Sum(a) => {
                if a.requires_grad() {
                    send(a, vec![g[0]; a.numel()]);
                }
            }
            Op::Mean(a) => {
                if a.requires_grad() {
                    let c = g[0] / a.numel() as f64;
                    send(a, vec![c; a.numel()]);
                }
            }
            Op::Transpose(a, ax1, ax2) => {
                if a.requires_grad() {
                    send(a, permute_swap(g, self.shape(), *ax1, *ax2));
                }
            }
            Op::Reshape(a) => {
                if a.requires_grad() {
                    send(a, g.to_vec());
                }
            }
            Op::Concat(parts, axis) => {
                let outer: usize = self.shape()[..*axis].iter().product();
                let inner: usize = self.shape()[*axis + 1..].iter().product();
                let total = self.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let l = p.shape()[*axis];
                    if p.requires_grad() {
                        let mut dp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + l * inner]);
                        }
                        send(p, dp);
                    }
                    offset += l;
                }
            }
            Op::Slice { x, axis, start } => {
                if x.requires_grad() {
                    let outer: usize = x.shape()[..*axis].iter().product();
                    let inner: usize = x.shape()[*axis + 1..].iter().product();
                    let total = x.shape()[*axis];
                    let l = self.shape()[*axis];
                    let mut dx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * l * inner;
                        dx[dst..dst + l * inner].copy_from_slice(&g[src..src + l * inner]);
                    }
                    send(x, dx);
                }
            }
            Op::Softmax(a, axis) => {
                if a.requires_grad() {
                    let y = self.values();
                    let outer: usize = self.shape()[..*axis].iter().product();
                    let len = self.shape()[*axis];
                    let inner: usize = self.shape()[*axis + 1..].iter().product();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    send(a, dx);
                }
            }
            Op::Custom { parents, grad } => {
                let parent_grads = grad.backward(g);
                debug_assert_eq!(parent_grads.len(), parents.len(), "{}", grad.name());
                for (p, dp) in parents.iter().zip(parent_grads) {
                    if p.requires_grad() {
                        send(p, dp);
                    }
                }
            }
        }
    }
}

/// Post-order over the `requires_grad` subgraph: parents before consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, pi)) = stack.pop() {
        let parents: Vec<Tensor> = node
            .parents()
            .into_iter()
            .filter(|p| p.requires_grad())
            .collect();
        if pi < parents.len() {
            stack.push((node.clone(), pi + 1));
            let p = parents[pi].clone();
            if visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Shared dims for the trailing-two-axes matrix product.
/// Returns (batch, m, k, n, a_batched, b_batched).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("rank must be >= 2, got {a:?} x {b:?}"),
        });
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner axes disagree: {a:?} x {b:?}"),
        });
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let (batch, a_batched, b_batched) = if a_lead == b_lead {
        (a_lead.iter().product::<usize>().max(1), true, true)
    } else if b_lead.is_empty() {
        (a_lead.iter().product(), true, false)
    } else if a_lead.is_empty() {
        (b_lead.iter().product(), false, true)
    } else {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("leading axes disagree: {a:?} x {b:?}"),
        });
    };
    Ok((batch, m, ka, n, a_batched, b_batched))
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
}

/// c (m,p) += a (m,n) * b^T where b is (p,n).
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * p..(i + 1) * p];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c (k,n) += a^T * b where a is (m,k), b is (m,n).
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Materialize an axis-swap permutation of row-major data.
fn permute_swap(data: &[f64], in_shape: &[usize], ax1: usize, ax2: usize) -> Vec<f64> {
    if ax1 == ax2 {
        return data.to_vec();
    }
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let mut out_shape = in_shape.to_vec();
    out_shape.swap(ax1, ax2);
    // stride walk: output axis i advances the input by the stride of the
    // input axis it came from
    let mut walk = vec![0usize; rank];
    for i in 0..rank {
        let src = if i == ax1 {
            ax2
        } else if i == ax2 {
            ax1
        } else {
            i
        };
        walk[i] = in_strides[src];
    }
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Elementwise combine with the crate's broadcast rule. Returns output shape
/// and values. Exactly one of the operands may be smaller: a scalar (one
/// element) or a trailing-suffix shape expanded over leading axes.
fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let av = a.values();
    let bv = b.values();
    if a.shape() == b.shape() {
        let out = av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape().to_vec(), out));
    }
    // scalar operand
    if b.numel() == 1 {
        let s = bv[0];
        return Ok((a.shape().to_vec(), av.iter().map(|&x| f(x, s)).collect()));
    }
    if a.numel() == 1 {
        let s = av[0];
        return Ok((b.shape().to_vec(), bv.iter().map(|&y| f(s, y)).collect()));
    }
    // suffix broadcast
    if is_suffix(b.shape(), a.shape()) {
        let bn = b.numel();
        let mut out = Vec::with_capacity(a.numel());
        for chunk in av.chunks_exact(bn) {
            out.extend(chunk.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Ok((a.shape().to_vec(), out));
    }
    if is_suffix(a.shape(), b.shape()) {
        let an = a.numel();
        let mut out = Vec::with_capacity(b.numel());
        for chunk in bv.chunks_exact(an) {
            out.extend(av.iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Ok((b.shape().to_vec(), out));
    }
    Err(Error::Shape {
        op,
        detail: format!(
            "{:?} vs {:?} (broadcast allows equal shapes, a scalar, or a trailing suffix)",
            a.shape(),
            b.shape()
        ),
    })
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() < big.len() && big[big.len() - small.len()..] == *small
}

/// Reduce an output-shaped gradient back to an operand of `target_len`
/// elements under the suffix/scalar broadcast rule.
fn reduce_to_operand(g: &[f64], target_len: usize) -> Vec<f64> {
    if g.len() == target_len {
        return g.to_vec();
    }
    debug_assert_eq!(g.len() % target_len, 0);
    let mut out = vec![0.0; target_len];
    for chunk in g.chunks_exact(target_len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// Gradient of one side of a broadcast multiply: (g * other) reduced to the
/// target operand's length. `other` may itself be the smaller operand.
fn bcast_product(g: &[f64], other: &[f64], target_len: usize) -> Vec<f64> {
    let full: Vec<f64> = if other.len() == g.len() {
        g.iter().zip(other).map(|(a, b)| a * b).collect()
    } else if other.len() == 1 {
        g.iter().map(|a| a * other[0]).collect()
    } else {
        let mut v = Vec::with_capacity(g.len());
        for chunk in g.chunks_exact(other.len()) {
            v.extend(chunk.iter().zip(other).map(|(a, b)| a * b));
        }
        v
    };
    reduce_to_operand(&full, target_len)
}
