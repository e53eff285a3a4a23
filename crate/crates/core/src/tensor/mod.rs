//! Dense real tensors with reverse-mode automatic differentiation.
//!
//! Values are stored flat in row-major order. Every derived tensor records
//! its parent tensors and a backward closure; calling [`Tensor::backward`]
//! on a scalar replays the recorded operations in reverse topological order,
//! accumulating gradients into every tensor that requires them. A tensor
//! used k times receives k additive gradient contributions.
//!
//! The graph is confined to one thread (`Rc`/`RefCell`); independent graphs
//! on different threads share nothing.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

mod conv;
mod matmul;
mod ops;
pub(crate) mod shape;

pub use shape::broadcast_shape;

/// Element type tag stored in checkpoint files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`; 64-bit is
/// the verification default, 32-bit is selectable per run for speed.
pub trait Real:
    num_traits::Float + fmt::Debug + fmt::Display + std::iter::Sum + Default + 'static
{
    const DTYPE: Dtype;

    /// Lossy conversion from an `f64` constant.
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn c(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn c(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub(crate) type Buffer<T> = Rc<RefCell<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

struct Op<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Buffer<T>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Dense n-dimensional tensor. Cloning is cheap (shared handle).
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Real> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad,
                op: None,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "tensor shape must have positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![T::zero(); shape.iter().product()], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; shape.iter().product()], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::c(z * std)
            })
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Marks a leaf tensor as a trainable parameter.
    pub fn trainable(self) -> Self {
        assert!(self.inner.op.is_none(), "only leaf tensors can be marked trainable");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                grad: RefCell::new(None),
                requires_grad: true,
                op: None,
            }),
        }
    }

    /// Derived tensor with a freshly allocated buffer. The op is recorded
    /// only when some parent requires gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[Tensor<T>]) + 'static,
    ) -> Self {
        Self::from_op_shared(shape, Rc::new(RefCell::new(data)), parents, backward)
    }

    /// Same as [`from_op`] but the caller keeps a handle to the output
    /// buffer (for backward rules that reuse the forward result).
    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Buffer<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[Tensor<T>]) + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.borrow().len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let op = if requires_grad {
            Some(Op { parents, backward: Box::new(backward) })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn buffer(&self) -> Buffer<T> {
        Rc::clone(&self.inner.data)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.inner.data.borrow()[0]
    }

    /// Element at a multi-dimensional index.
    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let strides = shape::strides(&self.inner.shape);
        let flat: usize = index
            .iter()
            .zip(&strides)
            .map(|(&i, &s)| {
                assert!(i < usize::MAX);
                i * s
            })
            .sum();
        self.inner.data.borrow()[flat]
    }

    /// Overwrites the values of a leaf tensor (parameter updates, gradient
    /// checking). Derived tensors are immutable.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        assert!(self.inner.op.is_none(), "cannot overwrite a derived tensor");
        if values.len() != self.numel() {
            return Err(Error::DataLength { expected: self.numel(), got: values.len() });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Overwrites one element of a leaf tensor by flat index.
    pub fn set_value(&self, flat_index: usize, value: T) {
        assert!(self.inner.op.is_none(), "cannot overwrite a derived tensor");
        self.inner.data.borrow_mut()[flat_index] = value;
    }

    /// In-place update of a leaf tensor's values.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.inner.op.is_none(), "cannot overwrite a derived tensor");
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds a contribution into this tensor's gradient buffer.
    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Errors when any stored value is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.inner.data.borrow().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Reverse-mode differentiation from a scalar. Gradients accumulate on
    /// every reachable tensor that requires them; gradients of intermediate
    /// nodes are released as soon as they have been consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::BackwardNonScalar { numel: self.numel() });
        }
        if self.inner.op.is_none() {
            return Err(Error::BackwardDetached);
        }
        let order = self.topo_order();
        *self.inner.grad.borrow_mut() = Some(vec![T::one()]);
        for node in order.iter().rev() {
            let Some(op) = &node.inner.op else { continue };
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            (op.backward)(&grad, &op.parents);
            // Intermediate gradients are no longer needed once propagated.
            *node.inner.grad.borrow_mut() = None;
        }
        Ok(())
    }

    /// Post-order over the recorded graph: parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for parent in &op.parents {
                    if parent.inner.op.is_some() && !visited.contains(&parent.id()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let preview: Vec<&T> = data.iter().take(8).collect();
        write!(
            f,
            "Tensor{{shape: {:?}, requires_grad: {}, data: {:?}{}}}",
            self.inner.shape,
            self.inner.requires_grad,
            preview,
            if data.len() > 8 { ", ..." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { expected: 6, got: 5 }));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn backward_on_detached_tensor_errors() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(matches!(x.backward(), Err(Error::BackwardDetached)));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap().trainable();
        let y = x.square();
        assert!(matches!(y.backward(), Err(Error::BackwardNonScalar { numel: 2 })));
    }

    #[test]
    fn reused_tensor_accumulates_contributions() {
        // y = x + x  =>  dy/dx = 2
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().trainable();
        let y = x.add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn validate_finite_flags_nan() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            x.validate_finite("unit"),
            Err(Error::NonFinite { .. })
        ));
        let y = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(y.validate_finite("unit").is_ok());
    }
}
