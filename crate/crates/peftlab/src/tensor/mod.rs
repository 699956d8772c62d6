//! Flat-storage tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted buffer of `f64` in row-major order
//! plus a shape, an optional gradient slot, and a record of the operation
//! that produced it. Forward operations link outputs to their inputs, so the
//! computation tape is the implicit DAG hanging off whatever value you call
//! [`Tensor::backward`] on. Design points:
//!
//! * Scalars are shape `[1]`; there are no zero-sized dimensions.
//! * Results of forward ops are immutable. Only parameter leaves are ever
//!   rewritten (by the optimizer, between steps, never while a graph built
//!   from them still needs a backward pass).
//! * Gradients accumulate additively: two backward passes without an
//!   intervening [`Tensor::zero_grad`] double every gradient.
//! * An operation records itself only when some input requires a gradient;
//!   inference-mode forwards therefore build no graph at all.
//! * Every forward op verifies its output is finite and reports overflow as
//!   an error instead of letting NaN/Inf propagate silently.

pub mod autograd;
pub mod ops;

pub use ops::{concat, cross_entropy, embedding_lookup};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use autograd::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Cheaply clonable handle to a tensor node.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::ShapeMismatch {
            op: "tensor",
            detail: format!("shape {shape:?} has an empty dimension"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::ShapeMismatch {
            op: "tensor",
            detail: format!("{data_len} values cannot fill shape {shape:?}"),
        });
    }
    Ok(())
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

impl Tensor {
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op,
        }))
    }

    /// Constant leaf (does not require a gradient).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        check_finite(&data, "from_vec")?;
        Ok(Tensor::new(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Trainable leaf (requires a gradient).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        check_finite(&data, "param")?;
        Ok(Tensor::new(data, shape.to_vec(), true, Op::Leaf))
    }

    /// Internal constructor for op outputs. Drops the op record when no
    /// input requires a gradient so inference builds no graph.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Result<Tensor> {
        check_finite(&data, op.name())?;
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(Tensor::new(data, shape, requires_grad, op))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape)
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![1.0; numel], shape)
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Result<Tensor> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(data, &[n, n])
    }

    /// Scalar constant of shape `[1]`.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the current values.
    pub fn data(&self) -> Vec<f64> {
        self.0.data.read().unwrap().clone()
    }

    pub(crate) fn read(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().unwrap()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics when the tensor holds more than one value; callers decide
    /// scalar-ness structurally (loss values, captured scores), so a
    /// violation is a programming error, not an input error.
    pub fn item(&self) -> f64 {
        let d = self.0.data.read().unwrap();
        assert!(
            d.len() == 1,
            "item() called on tensor of shape {:?}",
            self.0.shape
        );
        d[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor since the last `zero_grad`.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Overwrite the values of a leaf tensor (optimizer updates).
    pub(crate) fn set_data(&self, new: Vec<f64>) -> Result<()> {
        check_finite(&new, "set_data")?;
        let mut d = self.0.data.write().unwrap();
        assert_eq!(d.len(), new.len(), "set_data must preserve the element count");
        *d = new;
        Ok(())
    }

    /// Fresh constant leaf holding a copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.data(), self.0.shape.clone(), false, Op::Leaf)
    }

    /// Trainable leaf holding a copy of this tensor's current values.
    pub fn detach_trainable(&self) -> Tensor {
        Tensor::new(self.data(), self.0.shape.clone(), true, Op::Leaf)
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    /// Reverse-mode sweep from this (scalar) tensor; accumulates into the
    /// `grad` slot of every reachable tensor that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }

    /// Row count of a 2-D tensor (convenience for the model code).
    pub(crate) fn rows(&self) -> usize {
        self.0.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub(crate) fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub(crate) fn is_matrix(&self) -> bool {
        self.0.shape.len() == 2
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
