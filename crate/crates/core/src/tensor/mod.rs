//! Reverse-mode autodiff over dense NCHW tensors.
//!
//! Tensors are immutable value holders behind an `Arc`; every op records its
//! parents so `backward` can replay the graph in reverse creation order.
//! Gradients accumulate into per-tensor buffers guarded by a mutex, which
//! keeps handles `Send + Sync` without any global tape.

mod kernels;
mod ops;

pub use ops::*;

use crate::error::{Error, Result};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

/// Element type of a tensor: `f32` for training, `f64` for shadow-precision
/// gradient checks. The GEMM hook dispatches to the matching BLAS kernel.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE_NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C <- alpha * A(m x k) * B(k x n) + beta * C, row-major strides.
    ///
    /// # Safety
    ///
    /// `a`, `b`, and `c` must be valid for the full extent addressed by the
    /// matrix dimensions and strides (reads for `a`/`b`, writes for `c`),
    /// and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE_NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE_NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense NCHW shape. Scalars are (1,1,1,1); 1-D vectors ride as (1,C,1,1).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Which parents an op node has and what it saved for backward.
pub(crate) enum Op<E: Scalar> {
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    Relu(Tensor<E>),
    Sigmoid(Tensor<E>),
    SumAll(Tensor<E>),
    SumChannels(Tensor<E>),
    Conv2d {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    AvgPool2(Tensor<E>),
    MaxPool2 {
        x: Tensor<E>,
        argmax: Vec<u32>,
    },
    Upsample2(Tensor<E>),
    ConcatChannels(Tensor<E>, Tensor<E>),
    GridSample {
        x: Tensor<E>,
        grid: Tensor<E>,
    },
    BceWithLogitsMean {
        logits: Tensor<E>,
        target: Tensor<E>,
    },
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Shape,
    data: Vec<E>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    op: Option<Op<E>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Cheap-to-clone handle to one node of the computation graph.
pub struct Tensor<E: Scalar = f32> {
    inner: Arc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Arc::clone(&self.inner) }
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>{} id={} grad={}",
            E::DTYPE_NAME,
            self.shape(),
            self.inner.id,
            self.inner.requires_grad
        )
    }
}

impl<E: Scalar> Tensor<E> {
    fn alloc(shape: Shape, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Shape, data: Vec<E>, op: Op<E>) -> Self {
        let requires_grad = op_parents(&op).iter().any(|p| p.inner.requires_grad);
        Tensor::alloc(shape, data, requires_grad, Some(op))
    }

    /// Leaf tensor that does not take gradients (inputs, masks, targets).
    pub fn constant(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::dim(
                "numel",
                format!("shape {} wants {} elements, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor::alloc(shape, data, false, None))
    }

    /// Leaf tensor that accumulates gradients (trainable parameters,
    /// gradcheck probes).
    pub fn param(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::dim(
                "numel",
                format!("shape {} wants {} elements, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor::alloc(shape, data, true, None))
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::alloc(shape, vec![E::zero(); shape.numel()], false, None)
    }

    pub fn full(shape: Shape, v: E) -> Self {
        Tensor::alloc(shape, vec![v; shape.numel()], false, None)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::alloc(Shape::scalar(), vec![v], false, None)
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        assert!(self.inner.shape.is_scalar(), "item() on non-scalar tensor");
        self.inner.data[0]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.inner.data[self.inner.shape.idx(n, c, h, w)]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// New constant leaf sharing this tensor's values (cuts the graph).
    pub fn detach(&self) -> Tensor<E> {
        Tensor::alloc(self.inner.shape, self.inner.data.clone(), false, None)
    }

    fn accumulate_grad(&self, g: &[E]) {
        let mut guard = self.inner.grad.lock().unwrap();
        match guard.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves accumulate across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if !self.inner.shape.is_scalar() {
            return Err(Error::Contract(format!(
                "backward() needs a scalar, got shape {}",
                self.inner.shape
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Contract(
                "backward() on a tensor that does not depend on any parameter".into(),
            ));
        }

        // Reachable requires_grad subgraph, newest first. Creation ids are
        // monotone, so descending id order is a valid reverse topological
        // order.
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                for p in op_parents(op) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.inner.id));

        let mut pending: std::collections::HashMap<u64, Vec<E>> = std::collections::HashMap::new();
        pending.insert(self.inner.id, vec![E::one()]);

        for node in &nodes {
            let gout = match pending.remove(&node.inner.id) {
                Some(g) => g,
                None => continue, // grad-dead branch
            };
            match &node.inner.op {
                None => node.accumulate_grad(&gout),
                Some(op) => {
                    ops::backward_op(node, op, &gout, &mut |parent: &Tensor<E>, g: Vec<E>| {
                        if !parent.inner.requires_grad {
                            return;
                        }
                        match pending.entry(parent.inner.id) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                let buf = e.get_mut();
                                for (a, b) in buf.iter_mut().zip(&g) {
                                    *a += *b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn op_parents<E: Scalar>(op: &Op<E>) -> Vec<&Tensor<E>> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::SumAll(a)
        | Op::SumChannels(a)
        | Op::AvgPool2(a)
        | Op::Upsample2(a) => vec![a],
        Op::MaxPool2 { x, .. } => vec![x],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![x, w];
            if let Some(b) = b {
                v.push(b);
            }
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::GridSample { x, grid } => vec![x, grid],
        Op::BceWithLogitsMean { logits, target } => vec![logits, target],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), 119);
    }

    #[test]
    fn constructors_check_length() {
        assert!(Tensor::<f32>::constant(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::constant(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f32>::param(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        match t.backward() {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {:?}", other.err()),
        }
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let x = Tensor::<f32>::param(Shape::scalar(), vec![3.0]).unwrap();
        let y = crate::tensor::scale(&x, 2.0);
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }
}
