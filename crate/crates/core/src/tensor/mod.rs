//! Dense row-major tensors with a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is an immutable node in a dynamically recorded graph. Every
//! operation that touches a tensor with `requires_grad` records its inputs and a
//! backward rule; [`Tensor::backward`] replays those rules in reverse creation
//! order. Node ids come from a global counter, so an op output always has a
//! larger id than any of its inputs and sorting by id is a valid topological
//! order.
//!
//! Leaf tensors (parameters and inputs) may have their storage overwritten in
//! place through [`Tensor::assign`]; this is how optimizers update weights and
//! how finite-difference checks perturb inputs. Op outputs never change.
//!
//! The element type is either `f32` (training) or `f64` (gradient checks and
//! oracle tests), chosen through the [`Float`] parameter.

mod autograd;
mod float;
pub mod gradcheck;
pub mod macs;
mod ops;

pub use autograd::{is_grad_enabled, no_grad, Gradients, NoGradGuard};
pub use float::{DType, Float};
pub use ops::{Conv2dOpts, PadMode};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct OpRecord<T: Float> {
    pub(crate) kind: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: bool,
    op: Option<OpRecord<T>>,
}

impl<T: Float> Drop for Node<T> {
    // Long chains would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let Some(op) = self.op.take() else { return };
        let mut stack = op.inputs;
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.inputs);
                }
            }
        }
    }
}

/// A dense n-dimensional array participating in the autodiff graph.
pub struct Tensor<T: Float = f32>(Arc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.kind))
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} needs {numel} elements, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<OpRecord<T>>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            requires_grad,
            op,
        }))
    }

    /// Constant leaf tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor tracked by the tape (a parameter or a differentiated input).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![1], vec![value], false, None)
    }

    /// Records an op output. Falls back to a constant when recording is off
    /// or no input is tracked.
    pub(crate) fn from_op<F>(
        shape: Vec<usize>,
        data: Vec<T>,
        kind: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{kind}");
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::make(shape, data, false, None);
        }
        Self::make(
            shape,
            data,
            true,
            Some(OpRecord {
                kind,
                inputs,
                backward: Box::new(backward),
            }),
        )
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_kind(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.kind)
    }

    pub(crate) fn op(&self) -> Option<&OpRecord<T>> {
        self.0.op.as_ref()
    }

    /// Read access to the row-major buffer.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor storage poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// A new untracked leaf with the same values.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Overwrites the storage of a leaf tensor.
    pub fn assign(&self, data: &[T]) -> Result<()> {
        self.update(|d| d.copy_from_slice(data))
    }

    /// Mutates the storage of a leaf tensor in place.
    pub fn update(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract(format!(
                "cannot mutate output of op `{}`",
                self.op_kind().unwrap_or("?")
            )));
        }
        let mut guard = self.0.data.write().expect("tensor storage poisoned");
        let before = guard.len();
        f(&mut guard);
        debug_assert_eq!(before, guard.len());
        Ok(())
    }

    /// Converts to another element type; the result is an untracked leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::of(v.as_f64())).collect();
        Tensor::make(self.0.shape.clone(), data, false, None)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        let a = self.data();
        let b = other.data();
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs().as_f64())
            // a NaN anywhere must not compare as close
            .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
    }
}
