//! Minimal n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, immutable after creation except for the gradient
//! buffer (written during `backward`) and parameter values (written by the
//! optimizer between forward passes). Every operation that combines tensors
//! rejects mismatched shapes; the only broadcasts are the documented ones
//! (`add_bias`, `scale_rows`, `scale_cols`).
//!
//! The computation graph is the DAG of `Tensor` handles: each non-leaf node
//! records its parents and a backward closure. `backward` on a scalar loss
//! replays the chain rule once per reachable node in reverse topological
//! order, accumulating (summing) gradients into every tensor that requires
//! them.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Element dtype tag, as persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type: f32 for training, f64 for gradient checks.
pub trait Scalar: Float + fmt::Debug + fmt::Display + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Additive logit mask value for excluded attention entries. Large enough
/// that `exp` underflows to exactly zero after max-subtraction, small enough
/// to stay finite in f32.
pub fn neg_mask<T: Scalar>() -> T {
    T::from_f64(-1.0e30)
}

thread_local! {
    static NEXT_TENSOR_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_TENSOR_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Context handed to a backward closure.
struct BackwardCtx<'a, T: Scalar> {
    grad: &'a [T],
    out: &'a [T],
    parents: &'a [Tensor<T>],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward_fn: Option<BackwardFn<T>>,
}

/// Handle to a node of the computation graph.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::DataLength {
            expected,
            got: len,
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    // ---- constructors ----

    pub fn new(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
            }),
        })
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::new(shape, data, false)
    }

    /// Leaf marked as a trainable parameter.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::new(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n], false).unwrap()
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n], false).unwrap()
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value], false).unwrap()
    }

    pub fn uniform(
        shape: Vec<usize>,
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
        requires_grad: bool,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng::uniform(rng, lo, hi)))
            .collect();
        Self::new(shape, data, requires_grad).unwrap()
    }

    pub fn normal(
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
        requires_grad: bool,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng::gauss(rng) * std))
            .collect();
        Self::new(shape, data, requires_grad).unwrap()
    }

    fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward_fn: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::new(shape, data, false).unwrap();
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward_fn: Some(backward_fn),
            }),
        }
    }

    // ---- accessors ----

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutate the raw values in place (optimizer updates, finite differences).
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    /// Copy of this tensor detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::new(self.inner.shape.clone(), self.to_vec(), false).unwrap()
    }

    fn accumulate_grad(&self, contrib: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    // ---- backward ----

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, next_parent)) = stack.pop() {
            if next_parent < node.inner.parents.len() {
                stack.push((node.clone(), next_parent + 1));
                let parent = node.inner.parents[next_parent].clone();
                if parent.requires_grad() && !visited.contains(&parent.id()) {
                    visited.insert(parent.id());
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        // Post-order lists producers first; reverse so each node is processed
        // after all of its consumers.
        order.reverse();
        order
    }

    /// Reverse-mode pass from a scalar loss. Gradients sum into every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order {
            let grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            let backward_fn = match &node.inner.backward_fn {
                Some(f) => f,
                None => continue,
            };
            let out = node.inner.data.borrow();
            let ctx = BackwardCtx {
                grad: &grad,
                out: &out,
                parents: &node.inner.parents,
            };
            let contribs = backward_fn(&ctx);
            drop(out);
            debug_assert_eq!(contribs.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if parent.requires_grad() {
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let data = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let data = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let neg = ctx.grad.iter().map(|&g| -g).collect();
                vec![Some(ctx.grad.to_vec()), Some(neg)]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let data = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let a = ctx.parents[0].values();
                let b = ctx.parents[1].values();
                let da = ctx.grad.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect();
                let db = ctx.grad.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.values().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.values().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * c).collect())]),
        )
    }

    // ---- activations ----

    pub fn silu(&self) -> Tensor<T> {
        let data = self
            .values()
            .iter()
            .map(|&x| x * (T::one() / (T::one() + (-x).exp())))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.parents[0].values();
                let d = ctx
                    .grad
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * (s + x * s * (T::one() - s))
                    })
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data = self
            .values()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let three = T::from_f64(3.0);
                let d = ctx
                    .grad
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let inner = c * (x + k * x * x * x);
                        let t = inner.tanh();
                        let sech2 = T::one() - t * t;
                        let d_inner = c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + t) + half * x * sech2 * d_inner)
                    })
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data = self.values().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let d = ctx
                    .grad
                    .iter()
                    .zip(ctx.out.iter())
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self
            .values()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let d = ctx
                    .grad
                    .iter()
                    .zip(ctx.out.iter())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.values().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::from_f64(1.0 / n as f64);
        let s = self.values().iter().fold(T::zero(), |acc, &x| acc + x) * inv;
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] * inv; n])]),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<T>> {
        check_len(&new_shape, self.numel())?;
        Ok(Tensor::from_op(
            new_shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// 2D transpose.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("transpose")?;
        let src = self.values();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = ctx.grad[j * r + i];
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        Ok((self.shape()[0], self.shape()[1]))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::IndexOutOfRange {
                what: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let data = self.values()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(
            vec![len, c],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); r * c];
                d[start * c..(start + len) * c].copy_from_slice(ctx.grad);
                vec![Some(d)]
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let src = self.values();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![r, len],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&ctx.grad[i * len..(i + 1) * len]);
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::DataLength {
                expected: 1,
                got: 0,
            });
        }
        let cols = parts[0].dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += r;
            row_counts.push(r);
            data.extend_from_slice(&p.values());
        }
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for &r in &row_counts {
                    out.push(Some(ctx.grad[offset..offset + r * cols].to_vec()));
                    offset += r * cols;
                }
                out
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::DataLength {
                expected: 1,
                got: 0,
            });
        }
        let rows = parts[0].dims2("concat_cols")?.0;
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            col_counts.push(c);
            cols += c;
        }
        let mut data = vec![T::zero(); rows * cols];
        let mut col_off = 0;
        for p in parts {
            let (_, c) = p.dims2("concat_cols")?;
            let src = p.values();
            for i in 0..rows {
                data[i * cols + col_off..i * cols + col_off + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            col_off += c;
        }
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut out = Vec::with_capacity(col_counts.len());
                let mut col_off = 0;
                for &c in &col_counts {
                    let mut d = vec![T::zero(); rows * c];
                    for i in 0..rows {
                        d[i * c..(i + 1) * c].copy_from_slice(
                            &ctx.grad[i * cols + col_off..i * cols + col_off + c],
                        );
                    }
                    out.push(Some(d));
                    col_off += c;
                }
                out
            }),
        ))
    }

    // ---- linear algebra ----

    /// Matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let data = {
            let a = self.values();
            let b = other.values();
            matmul_raw(&a, &b, m, k, n)
        };
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let a = ctx.parents[0].values();
                let b = ctx.parents[1].values();
                // dA = G . B^T ; dB = A^T . G
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &ctx.grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + grow[j] * brow[j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                let mut db = vec![T::zero(); k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = a[i * k + p];
                        if av != T::zero() {
                            let grow = &ctx.grad[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] = drow[j] + av * grow[j];
                            }
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ---- broadcast helpers (the documented broadcast cases) ----

    /// Add a `[d]` bias to every row of `[n x d]`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("add_bias")?;
        if bias.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let data = {
            let x = self.values();
            let b = bias.values();
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                for j in 0..d {
                    out.push(x[i * d + j] + b[j]);
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                let mut db = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] = db[j] + ctx.grad[i * d + j];
                    }
                }
                vec![Some(ctx.grad.to_vec()), Some(db)]
            }),
        ))
    }

    /// Scale row `i` of `[n x d]` by `s[i]`.
    pub fn scale_rows(&self, scales: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("scale_rows")?;
        if scales.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape().to_vec(),
                right: scales.shape().to_vec(),
            });
        }
        let data = {
            let x = self.values();
            let s = scales.values();
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                for j in 0..d {
                    out.push(x[i * d + j] * s[i]);
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone(), scales.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let s = ctx.parents[1].values();
                let mut dx = vec![T::zero(); n * d];
                let mut ds = vec![T::zero(); n];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = ctx.grad[i * d + j] * s[i];
                        ds[i] = ds[i] + ctx.grad[i * d + j] * x[i * d + j];
                    }
                }
                vec![Some(dx), Some(ds)]
            }),
        ))
    }

    /// Scale column `j` of `[n x m]` by `c[j]`.
    pub fn scale_cols(&self, scales: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, m) = self.dims2("scale_cols")?;
        if scales.numel() != m {
            return Err(Error::ShapeMismatch {
                op: "scale_cols",
                left: self.shape().to_vec(),
                right: scales.shape().to_vec(),
            });
        }
        let data = {
            let x = self.values();
            let c = scales.values();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    out.push(x[i * m + j] * c[j]);
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone(), scales.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let c = ctx.parents[1].values();
                let mut dx = vec![T::zero(); n * m];
                let mut dc = vec![T::zero(); m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = ctx.grad[i * m + j] * c[j];
                        dc[j] = dc[j] + ctx.grad[i * m + j] * x[i * m + j];
                    }
                }
                vec![Some(dx), Some(dc)]
            }),
        ))
    }

    // ---- row indexing ----

    /// Gather rows of `[r x d]` at the given indices (embedding lookup).
    /// Gradient scatter-adds back into the source rows.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (r, d) = self.dims2("index_rows")?;
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "index_rows",
                    index: i,
                    bound: r,
                });
            }
        }
        let data = {
            let src = self.values();
            let mut out = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                out.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
            out
        };
        let idx_own = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut dsrc = vec![T::zero(); r * d];
                for (row, &i) in idx_own.iter().enumerate() {
                    for j in 0..d {
                        dsrc[i * d + j] = dsrc[i * d + j] + ctx.grad[row * d + j];
                    }
                }
                vec![Some(dsrc)]
            }),
        ))
    }

    /// Scatter the rows of `[n x d]` into an `[rows x d]` grid at distinct
    /// positions; every other slot receives the `fill` vector.
    pub fn scatter_rows_with_fill(
        &self,
        positions: &[usize],
        fill: &Tensor<T>,
        rows: usize,
    ) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("scatter_rows_with_fill")?;
        if positions.len() != n {
            return Err(Error::PositionCountMismatch {
                positions: positions.len(),
                rows: n,
            });
        }
        if fill.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows_with_fill",
                left: self.shape().to_vec(),
                right: fill.shape().to_vec(),
            });
        }
        let mut occupied = vec![false; rows];
        for &p in positions {
            if p >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "scatter_rows_with_fill",
                    index: p,
                    bound: rows,
                });
            }
            if occupied[p] {
                return Err(Error::DuplicatePosition { position: p });
            }
            occupied[p] = true;
        }
        let data = {
            let src = self.values();
            let f = fill.values();
            let mut out = vec![T::zero(); rows * d];
            for l in 0..rows {
                out[l * d..(l + 1) * d].copy_from_slice(&f);
            }
            for (row, &p) in positions.iter().enumerate() {
                out[p * d..(p + 1) * d].copy_from_slice(&src[row * d..(row + 1) * d]);
            }
            out
        };
        let pos_own = positions.to_vec();
        Ok(Tensor::from_op(
            vec![rows, d],
            data,
            vec![self.clone(), fill.clone()],
            Box::new(move |ctx| {
                let mut dsrc = vec![T::zero(); n * d];
                let mut taken = vec![false; rows];
                for (row, &p) in pos_own.iter().enumerate() {
                    dsrc[row * d..(row + 1) * d].copy_from_slice(&ctx.grad[p * d..(p + 1) * d]);
                    taken[p] = true;
                }
                let mut dfill = vec![T::zero(); d];
                for l in 0..rows {
                    if !taken[l] {
                        for j in 0..d {
                            dfill[j] = dfill[j] + ctx.grad[l * d + j];
                        }
                    }
                }
                vec![Some(dsrc), Some(dfill)]
            }),
        ))
    }

    /// Forward: rows of `table` selected by `codes`, bit-exact. Backward:
    /// the straight-through estimator — gradient passes unchanged to `self`
    /// (the pre-quantization features); the table receives none.
    pub fn straight_through_rows(
        &self,
        table: &Tensor<T>,
        codes: &[usize],
    ) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("straight_through_rows")?;
        let (k, d2) = table.dims2("straight_through_rows")?;
        if d != d2 {
            return Err(Error::DimensionMismatch {
                what: "straight_through_rows feature dim",
                expected: d2,
                got: d,
            });
        }
        if codes.len() != n {
            return Err(Error::LengthMismatch {
                what: "straight_through_rows codes",
                left: codes.len(),
                right: n,
            });
        }
        let data = {
            let t = table.values();
            let mut out = Vec::with_capacity(n * d);
            for &c in codes {
                if c >= k {
                    return Err(Error::CodeOutOfRange { code: c, k });
                }
                out.extend_from_slice(&t[c * d..(c + 1) * d]);
            }
            out
        };
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    // ---- normalization ----

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let shape = self.shape().to_vec();
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.values();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * axis_len * inner + a * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..axis_len {
                    if src[at(a)] > max {
                        max = src[at(a)];
                    }
                }
                let mut sum = T::zero();
                for a in 0..axis_len {
                    let e = (src[at(a)] - max).exp();
                    data[at(a)] = e;
                    sum = sum + e;
                }
                for a in 0..axis_len {
                    data[at(a)] = data[at(a)] / sum;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                // ds_a = s_a * (g_a - sum_b g_b s_b) per slice
                let mut d = vec![T::zero(); ctx.out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * axis_len * inner + a * inner + i;
                        let mut dot = T::zero();
                        for a in 0..axis_len {
                            dot = dot + ctx.grad[at(a)] * ctx.out[at(a)];
                        }
                        for a in 0..axis_len {
                            d[at(a)] = ctx.out[at(a)] * (ctx.grad[at(a)] - dot);
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape.clone(),
                right: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let epsv = T::from_f64(eps);
        let data = {
            let x = self.values();
            let g = gain.values();
            let b = bias.values();
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let inv_d = T::from_f64(1.0 / d as f64);
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
                let var = row
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    * inv_d;
                let inv_std = T::one() / (var + epsv).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
            out
        };
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let g = ctx.parents[1].values();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let inv_d = T::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &ctx.grad[r * d..(r + 1) * d];
                    let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
                    let var = row
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_d;
                    let inv_std = T::one() / (var + epsv).sqrt();
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![T::zero(); d];
                    for j in 0..d {
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                        dxhat[j] = grow[j] * g[j];
                    }
                    let sum_dxhat = dxhat.iter().fold(T::zero(), |a, &v| a + v);
                    let sum_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .fold(T::zero(), |a, (&u, &v)| a + u * v);
                    for j in 0..d {
                        dx[r * d + j] = inv_std
                            * inv_d
                            * (T::from_f64(d as f64) * dxhat[j]
                                - sum_dxhat
                                - xhat[j] * sum_dxhat_xhat);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        ))
    }

    /// Group normalization of `[c x h x w]` with per-channel gain/bias.
    pub fn group_norm(
        &self,
        groups: usize,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                left: shape,
                right: vec![0, 0, 0],
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::DimensionMismatch {
                what: "group_norm groups",
                expected: c.max(1),
                got: groups,
            });
        }
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                left: self.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let epsv = T::from_f64(eps);
        let inv_g = T::from_f64(1.0 / gsize as f64);
        let data = {
            let x = self.values();
            let gv = gain.values();
            let bv = bias.values();
            let mut out = vec![T::zero(); x.len()];
            for g in 0..groups {
                let base = g * gsize;
                let gr = &x[base..base + gsize];
                let mean = gr.iter().fold(T::zero(), |a, &v| a + v) * inv_g;
                let var = gr
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    * inv_g;
                let inv_std = T::one() / (var + epsv).sqrt();
                for e in 0..gsize {
                    let ch = g * cpg + e / (h * w);
                    out[base + e] = (gr[e] - mean) * inv_std * gv[ch] + bv[ch];
                }
            }
            out
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let gv = ctx.parents[1].values();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for g in 0..groups {
                    let base = g * gsize;
                    let gr = &x[base..base + gsize];
                    let grow = &ctx.grad[base..base + gsize];
                    let mean = gr.iter().fold(T::zero(), |a, &v| a + v) * inv_g;
                    let var = gr
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_g;
                    let inv_std = T::one() / (var + epsv).sqrt();
                    let xhat: Vec<T> = gr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![T::zero(); gsize];
                    for e in 0..gsize {
                        let ch = g * cpg + e / (h * w);
                        dgain[ch] = dgain[ch] + grow[e] * xhat[e];
                        dbias[ch] = dbias[ch] + grow[e];
                        dxhat[e] = grow[e] * gv[ch];
                    }
                    let sum_dxhat = dxhat.iter().fold(T::zero(), |a, &v| a + v);
                    let sum_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .fold(T::zero(), |a, (&u, &v)| a + u * v);
                    for e in 0..gsize {
                        dx[base + e] = inv_std
                            * inv_g
                            * (T::from_f64(gsize as f64) * dxhat[e]
                                - sum_dxhat
                                - xhat[e] * sum_dxhat_xhat);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        ))
    }

    // ---- convolution ----

    /// 2D cross-correlation of `[c_in x h x w]` with `[c_out x c_in x kh x kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ci != ci2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 {
            return Err(Error::ConvGeometry {
                axis: 'h',
                input: h,
                kernel: kh,
                stride,
                padding,
                reason: "stride must be at least 1",
            });
        }
        let extent = |input: usize, kernel: usize, axis: char| -> Result<usize> {
            let padded = input + 2 * padding;
            if kernel > padded {
                return Err(Error::ConvGeometry {
                    axis,
                    input,
                    kernel,
                    stride,
                    padding,
                    reason: "kernel larger than padded input",
                });
            }
            if (padded - kernel) % stride != 0 {
                return Err(Error::ConvGeometry {
                    axis,
                    input,
                    kernel,
                    stride,
                    padding,
                    reason: "output extent is not an integer",
                });
            }
            Ok((padded - kernel) / stride + 1)
        };
        let oh = extent(h, kh, 'h')?;
        let ow = extent(w, kw, 'w')?;
        if let Some(b) = bias {
            if b.numel() != co {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: vec![co],
                    right: b.shape().to_vec(),
                });
            }
        }
        let data = {
            let x = self.values();
            let k = weight.values();
            let mut out = vec![T::zero(); co * oh * ow];
            for o in 0..co {
                let kbase = o * ci * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for c in 0..ci {
                            let xbase = c * h * w;
                            let kcbase = kbase + c * kh * kw;
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < padding || iy - padding >= h {
                                    continue;
                                }
                                let iy = iy - padding;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < padding || ix - padding >= w {
                                        continue;
                                    }
                                    let ix = ix - padding;
                                    acc = acc + x[xbase + iy * w + ix] * k[kcbase + ky * kw + kx];
                                }
                            }
                        }
                        out[o * oh * ow + oy * ow + ox] = acc;
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.values();
                for o in 0..co {
                    for e in 0..oh * ow {
                        out[o * oh * ow + e] = out[o * oh * ow + e] + bv[o];
                    }
                }
            }
            out
        };
        let mut parents = vec![self.clone(), weight.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![co, oh, ow],
            data,
            parents,
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let k = ctx.parents[1].values();
                let mut dx = vec![T::zero(); ci * h * w];
                let mut dk = vec![T::zero(); co * ci * kh * kw];
                let mut db = vec![T::zero(); co];
                for o in 0..co {
                    let kbase = o * ci * kh * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = ctx.grad[o * oh * ow + oy * ow + ox];
                            if g == T::zero() {
                                continue;
                            }
                            db[o] = db[o] + g;
                            for c in 0..ci {
                                let xbase = c * h * w;
                                let kcbase = kbase + c * kh * kw;
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < padding || iy - padding >= h {
                                        continue;
                                    }
                                    let iy = iy - padding;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < padding || ix - padding >= w {
                                            continue;
                                        }
                                        let ix = ix - padding;
                                        let xi = xbase + iy * w + ix;
                                        let ki = kcbase + ky * kw + kx;
                                        dx[xi] = dx[xi] + g * k[ki];
                                        dk[ki] = dk[ki] + g * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut out = vec![Some(dx), Some(dk)];
                if has_bias {
                    out.push(Some(db));
                }
                out
            }),
        ))
    }

    /// Nearest-neighbor 2x upsampling of `[c x h x w]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest2x",
                left: shape,
                right: vec![0, 0, 0],
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let data = {
            let x = self.values();
            let mut out = vec![T::zero(); c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let di = ch * h * w + (y / 2) * w + xx / 2;
                            d[di] = d[di] + ctx.grad[ch * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    // ---- losses ----

    /// Mean negative log-likelihood of integer targets under row-wise
    /// softmax of `[n x v]` logits. Numerically fused (log-sum-exp).
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (n, v) = self.dims2("cross_entropy_rows")?;
        if targets.len() != n {
            return Err(Error::LengthMismatch {
                what: "cross_entropy_rows targets",
                left: targets.len(),
                right: n,
            });
        }
        for &t in targets {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy_rows target",
                    index: t,
                    bound: v,
                });
            }
        }
        let loss = {
            let x = self.values();
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                let row = &x[r * v..(r + 1) * v];
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let lse = row
                    .iter()
                    .fold(T::zero(), |a, &b| a + (b - max).exp())
                    .ln()
                    + max;
                total = total + (lse - row[t]);
            }
            total * T::from_f64(1.0 / n as f64)
        };
        let targets_own = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].values();
                let g = ctx.grad[0] * T::from_f64(1.0 / n as f64);
                let mut d = vec![T::zero(); n * v];
                for (r, &t) in targets_own.iter().enumerate() {
                    let row = &x[r * v..(r + 1) * v];
                    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let exps: Vec<T> = row.iter().map(|&b| (b - max).exp()).collect();
                    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
                    for j in 0..v {
                        let p = exps[j] / sum;
                        let onehot = if j == t { T::one() } else { T::zero() };
                        d[r * v + j] = g * (p - onehot);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}

/// Plain triple-loop matrix product on slices, `[m x k] . [k x n]`.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// Mean squared error between two same-shape tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let diff = a.sub(b)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// Central finite differences of `eval()` with respect to one parameter
/// tensor, element by element. `eval` must rebuild the forward pass from the
/// parameter's current values; only forward evaluations are used.
pub fn finite_difference<T: Scalar>(
    param: &Tensor<T>,
    mut eval: impl FnMut() -> Result<f64>,
    step: f64,
) -> Result<Vec<f64>> {
    let n = param.numel();
    let mut grads = vec![0.0f64; n];
    for i in 0..n {
        let orig = param.values()[i];
        param.with_data_mut(|d| d[i] = T::from_f64(orig.as_f64() + step));
        let plus = eval()?;
        param.with_data_mut(|d| d[i] = T::from_f64(orig.as_f64() - step));
        let minus = eval()?;
        param.with_data_mut(|d| d[i] = orig);
        grads[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grads)
}

/// Relative error with an absolute floor, for gradient comparisons.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
