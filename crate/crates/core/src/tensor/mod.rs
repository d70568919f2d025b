//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a contiguous scalar buffer. Tensors are
//! cheap to clone (clones share the buffer). Gradients are recorded on an
//! explicit [`Tape`](tape::Tape) through a [`Graph`](graph::Graph) forward
//! context; tensors created outside a recording scope carry no tape handle.

mod check;
mod graph;
pub(crate) mod ops;
mod tape;

pub use check::{finite_diff_check, finite_diff_check_params, sample_active_coordinates};
pub use graph::Graph;
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{shape_str, Error, Result};
use crate::scalar::Scalar;

/// Dense tensor. Row-major storage, shared buffer on clone.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<S>>>,
    /// (tape id, node index) when this tensor is recorded on a live tape.
    node: Cell<Option<(u64, usize)>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish_non_exhaustive()
    }
}

pub(crate) fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if element_count(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{} elements for shape {}", element_count(&shape), shape_str(&shape)),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self::new_unchecked(shape, data))
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![S::zero(); element_count(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![S::one(); element_count(shape)])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![value; element_count(shape)])
    }

    pub fn scalar(value: S) -> Self {
        Self::new_unchecked(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        element_count(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn get(&self, index: &[usize]) -> S {
        let flat = flat_index(&self.inner.shape, index);
        self.inner.data.borrow()[flat]
    }

    /// Mutate the buffer in place. Used by the optimizer and by tests;
    /// never call while a tape referencing this tensor is still live.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn with_requires_grad(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    /// Accumulated gradient, if any backward pass has deposited one.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutate the gradient buffer in place, if one is present.
    pub fn update_grad(&self, f: impl FnOnce(&mut [S])) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    /// Add `delta` into the grad slot, allocating it on first use. The
    /// backward pass deposits leaf gradients through this.
    pub fn accumulate_grad(&self, delta: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn node_on(&self, tape_id: u64) -> Option<usize> {
        match self.inner.node.get() {
            Some((tid, node)) if tid == tape_id => Some(node),
            _ => None,
        }
    }

    pub(crate) fn set_node(&self, tape_id: u64, node: usize) {
        self.inner.node.set(Some((tape_id, node)));
    }

    /// Whether this tensor currently carries any tape handle.
    pub fn has_node(&self) -> bool {
        self.inner.node.get().is_some()
    }

    /// Deep copy: fresh buffer, no grad, no tape handle.
    pub fn detached_copy(&self) -> Self {
        Self::new_unchecked(self.inner.shape.clone(), self.to_vec())
    }

    /// Cast the element type, e.g. f32 -> f64 for gradient checks.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::new_unchecked(self.inner.shape.clone(), data)
    }

    pub fn iter_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    let mut flat = 0;
    for (extent, i) in shape.iter().zip(index) {
        debug_assert!(i < extent);
        flat = flat * extent + i;
    }
    flat
}

/// Boolean key-validity mask for one batch: `keep[b * len + k]` is true when
/// key position `k` of batch row `b` is a real (non-padded) position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMask {
    pub batch: usize,
    pub len: usize,
    keep: Vec<bool>,
}

impl KeyMask {
    pub fn new(batch: usize, len: usize, keep: Vec<bool>) -> Self {
        assert_eq!(keep.len(), batch * len, "mask buffer size");
        KeyMask { batch, len, keep }
    }

    pub fn all_valid(batch: usize, len: usize) -> Self {
        KeyMask {
            batch,
            len,
            keep: vec![true; batch * len],
        }
    }

    pub fn keep(&self, batch_row: usize, key: usize) -> bool {
        self.keep[batch_row * self.len + key]
    }

    pub fn row(&self, batch_row: usize) -> &[bool] {
        &self.keep[batch_row * self.len..(batch_row + 1) * self.len]
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.keep
    }

    /// Concatenate along the key axis (used when text and image tokens are
    /// joined into one sequence).
    pub fn concat(&self, other: &KeyMask) -> KeyMask {
        assert_eq!(self.batch, other.batch);
        let len = self.len + other.len;
        let mut keep = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            keep.extend_from_slice(self.row(b));
            keep.extend_from_slice(other.row(b));
        }
        KeyMask::new(self.batch, len, keep)
    }
}

/// Integer id matrix, `[batch, len]` row-major. Token ids stay integral so
/// embedding lookups are exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub batch: usize,
    pub len: usize,
    pub data: Vec<u32>,
}

impl IdMatrix {
    pub fn new(batch: usize, len: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), batch * len, "id buffer size");
        IdMatrix { batch, len, data }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.data[b * self.len..(b + 1) * self.len]
    }

    pub fn get(&self, b: usize, t: usize) -> u32 {
        self.data[b * self.len + t]
    }
}
