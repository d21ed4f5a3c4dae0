//! Dense tensors and the reverse-mode tape.
//!
//! Values are contiguous row-major buffers of [`Elem`] (f64 by default, f32
//! behind the `f32` feature for speed). Differentiable computation goes
//! through [`tape::Tape`]: every op appends a node, `backward` replays the
//! recorded ops once in reverse. Parameters live outside the tape as
//! [`SharedTensor`]s; registering one on a tape snapshots its data, and
//! `backward` accumulates the resulting gradient back into the shared cell.

pub mod grad_check;
pub mod kernels;
pub mod tape;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

#[cfg(feature = "f32")]
pub type Elem = f32;
#[cfg(not(feature = "f32"))]
pub type Elem = f64;

/// Widens an element to f64 at metric and serialization boundaries, which
/// stay f64 regardless of the training precision.
pub fn to_f64(v: Elem) -> f64 {
    #[allow(clippy::unnecessary_cast)]
    {
        v as f64
    }
}

/// Narrows an f64 into the element type (identity under the default build).
pub fn from_f64(v: f64) -> Elem {
    #[allow(clippy::unnecessary_cast)]
    {
        v as Elem
    }
}

/// Numeric tolerances, scaled to the element precision.
pub mod tol {
    use super::Elem;

    /// Max relative error accepted by finite-difference gradient checks.
    #[cfg(not(feature = "f32"))]
    pub const GRAD_CHECK_MAX_REL: Elem = 1e-4;
    #[cfg(feature = "f32")]
    pub const GRAD_CHECK_MAX_REL: Elem = 1e-2;

    /// Central-difference step for gradient checks.
    #[cfg(not(feature = "f32"))]
    pub const FD_EPSILON: Elem = 1e-5;
    #[cfg(feature = "f32")]
    pub const FD_EPSILON: Elem = 1e-2;

    /// Loosens an f64-calibrated absolute bound to what O(1) arithmetic can
    /// hold at the active precision. Identity under the default build.
    pub fn abs_bound(tight: f64) -> Elem {
        if cfg!(feature = "f32") {
            super::from_f64(tight.max(1e-4))
        } else {
            super::from_f64(tight)
        }
    }

    /// Same idea for finite-difference relative errors, which are dominated
    /// by the FD step size rather than by accumulation.
    pub fn rel_bound(tight: f64) -> Elem {
        if cfg!(feature = "f32") {
            super::from_f64(tight).max(GRAD_CHECK_MAX_REL)
        } else {
            super::from_f64(tight)
        }
    }
}

pub fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// A plain value: shape + data, with an optional gradient buffer that is
/// populated by `Tape::backward` for tensors that require grad.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
    grad: Option<Vec<Elem>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {} implies {} elements, got {}", fmt_shape(&shape), numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: Elem) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    /// Uniform init in [lo, hi), the workhorse for parameter construction.
    pub fn uniform<R: rand::Rng>(rng: &mut R, shape: Vec<usize>, lo: Elem, hi: Elem) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn scalar(value: Elem) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, requires: bool) -> Self {
        self.requires_grad = requires;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[Elem]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    /// Gradients from several tape registrations of the same tensor sum here.
    pub fn accumulate_grad(&mut self, g: &[Elem]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += *src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Multiplies the gradient buffer in place; no-op when absent.
    pub fn scale_grad(&mut self, factor: Elem) {
        if let Some(g) = &mut self.grad {
            for v in g {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm of the gradient buffer (0 when absent).
    pub fn grad_norm_sq(&self) -> Elem {
        self.grad.as_ref().map_or(0.0, |g| g.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major 2-D accessor for tests and small math.
    pub fn at(&self, r: usize, c: usize) -> Elem {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }
}

/// Parameters are shared between the model that owns them, the tapes that
/// read them, and the optimizer that updates them. Single-threaded by design.
pub type SharedTensor = Rc<RefCell<Tensor>>;

pub fn shared(t: Tensor) -> SharedTensor {
    Rc::new(RefCell::new(t.with_requires_grad(true)))
}

/// Non-trainable shared state (batch-norm running stats and the like).
pub fn shared_buffer(t: Tensor) -> SharedTensor {
    Rc::new(RefCell::new(t.with_requires_grad(false)))
}
