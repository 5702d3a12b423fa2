//! Reverse-mode autodiff tensor engine.
//!
//! A `Tensor` is a cheap handle (`Rc`) to an immutable-shape buffer plus an
//! optional backpointer to the op that produced it. Calling [`Tensor::backward`]
//! on a scalar walks the graph in reverse topological order and accumulates
//! gradients into every `requires_grad` leaf. Gradients accumulate across
//! calls until [`Tensor::zero_grad`] is invoked.

mod backward;
mod fd;
mod ops;

pub use backward::Tape;
pub use fd::finite_diff_check;
pub use ops::Op;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
    static DEBUG_CHECK: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient recording disabled (nestable).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

/// When enabled, every op rejects non-finite outputs with the offending
/// flat position. Off by default (it is a full extra pass per op).
pub fn set_debug_check(on: bool) {
    DEBUG_CHECK.with(|c| c.set(on));
}

pub(crate) fn debug_check_enabled() -> bool {
    DEBUG_CHECK.with(|c| c.get())
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Shared handle to an n-dimensional array participating in autodiff.
pub struct Tensor<T: Scalar>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn make(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// New constant (non-learnable) tensor; errors if data length and shape disagree.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                detail: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// New learnable leaf (gradient will be accumulated for it).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            shape: t.0.shape.clone(),
            data: RefCell::new(t.to_vec()),
            grad: RefCell::new(None),
            requires_grad: true,
            op: None,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::make(vec![T::zero(); numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::make(vec![value; numel], shape.to_vec(), false, None)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], Vec::new(), false, None)
    }

    /// I.i.d. draws from N(mean, std^2).
    pub fn randn<R: rand::Rng>(shape: &[usize], mean: T, std: T, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::standard_normal(rng) * std + mean)
            .collect();
        Self::make(data, shape.to_vec(), false, None)
    }

    /// I.i.d. draws from U[lo, hi).
    pub fn rand_uniform<R: rand::Rng>(shape: &[usize], lo: T, hi: T, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::uniform01(rng) * (hi - lo) + lo)
            .collect();
        Self::make(data, shape.to_vec(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.0.op.as_ref()
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the raw buffer (used by the optimizer and finite
    /// differencing). Never mutate a tensor that is still referenced by a
    /// live graph you intend to differentiate.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Mutable view of the gradient buffer, if one has been accumulated.
    pub fn grad_mut(&self) -> RefMut<'_, Option<Vec<T>>> {
        self.0.grad.borrow_mut()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Add `contribution` into the gradient buffer, allocating on first use.
    pub(crate) fn accumulate_grad(&self, contribution: Vec<T>) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    pub(crate) fn grad_clone_or_none(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Same values, cut off from the graph, non-learnable.
    pub fn detach(&self) -> Tensor<T> {
        Self::make(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Copy values out into a fresh f64 vector (for reference checks).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.numel(), 3);
    }

    #[test]
    fn scalar_item() {
        let s = Tensor::scalar(2.5f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
        let v = Tensor::<f32>::zeros(&[2, 2]);
        assert!(v.item().is_err());
    }

    #[test]
    fn no_grad_nests() {
        assert!(grad_enabled());
        no_grad(|| {
            assert!(!grad_enabled());
            no_grad(|| assert!(!grad_enabled()));
            assert!(!grad_enabled());
        });
        assert!(grad_enabled());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let t = Tensor::<f64>::param(vec![0.0, 0.0], &[2]).unwrap();
        t.accumulate_grad(vec![1.0, 2.0]);
        t.accumulate_grad(vec![0.5, 0.5]);
        assert_eq!(t.grad_vec().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad_vec().is_none());
    }
}
