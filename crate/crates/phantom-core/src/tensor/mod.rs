//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to row-major storage plus an
//! optional gradient buffer. Operations live on [`Tape`]; running an op
//! through a recording tape appends a backward rule, and [`Tape::backward`]
//! replays the rules in reverse to fill `grad` on every participating tensor
//! that requires gradients. A non-recording tape executes the same forward
//! math with no bookkeeping, which is what inference and finite-difference
//! probes use.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_sampled};
pub use tape::Tape;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{PhantomError, Result};

/// Additive mask value treated as "attention forbidden". Rows whose every
/// logit sits at or below [`MASK_ROW_THRESHOLD`] after masking are rejected.
pub const MASK_VALUE: f64 = -1e30;

/// Threshold used to detect rows where every key has been masked out.
pub const MASK_ROW_THRESHOLD: f64 = -5e29;

pub(crate) struct TensorInner {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

/// Shared handle to tensor storage. Cloning is O(1) and aliases the data;
/// all mutation goes through the tape, the optimizer, or explicit setters.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PhantomError::InvalidShape {
                op: "Tensor::new",
                msg: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false))
    }

    /// Builds a trainable tensor (gradients will be tracked).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![1.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel], false)
    }

    /// A rank-1 single-element tensor, the shape produced by reductions.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], false)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                grad: None,
                requires_grad,
            })),
        }
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    /// Size along one axis.
    pub fn dim(&self, axis: usize) -> usize {
        self.inner.borrow().shape[axis]
    }

    /// Clones the row-major data out. Intended for inspection, not hot loops.
    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(
            inner.data.len() == 1,
            "item() on tensor of shape {:?}",
            inner.shape
        );
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.inner.borrow_mut().requires_grad = requires_grad;
    }

    /// Clones the gradient buffer out, if one has been populated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Drops the gradient buffer (it is re-created lazily by the tape).
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replaces the data in place; the shape must be unchanged.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn borrow(&self) -> Ref<'_, TensorInner> {
        self.inner.borrow()
    }

    pub(crate) fn borrow_mut(&self) -> RefMut<'_, TensorInner> {
        self.inner.borrow_mut()
    }

    /// Makes sure a zeroed gradient buffer exists for a grad-requiring tensor,
    /// so that "participated in a recorded op" implies "has a gradient" after
    /// backward even when no gradient actually flows.
    pub(crate) fn ensure_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if inner.requires_grad && inner.grad.is_none() {
            let n = inner.data.len();
            inner.grad = Some(vec![0.0; n]);
        }
    }

    /// Accumulates `delta` into the gradient buffer.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        if inner.grad.is_none() {
            let n = inner.data.len();
            inner.grad = Some(vec![0.0; n]);
        }
        let g = inner.grad.as_mut().unwrap();
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("numel", &inner.data.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn clone_aliases_storage() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.clone();
        b.set_data(&[3.0, 4.0]);
        assert_eq!(a.value(), vec![3.0, 4.0]);
        assert!(a.same_storage(&b));
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(2.5).item(), 2.5);
    }
}
