//! Dense float tensors on a per-step reverse-mode tape.
//!
//! Training runs in `f32`; verification suites instantiate the same code with
//! `f64`. A [`Graph`] is built fresh for every forward pass and consumed by
//! [`Graph::backward`], which deposits gradients into the grad slots of leaf
//! tensors created with [`Tensor::param`].

mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::grad_check;
pub use graph::Graph;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Lower clamp applied by the `log` op before taking the logarithm.
    const LOG_CLAMP: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_value(self) -> bool;
    fn exp_value(self) -> Self;
    fn ln_value(self) -> Self;
    fn max_value(self, other: Self) -> Self;

    /// `c = alpha * a @ b + beta * c` over raw strided buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const LOG_CLAMP: Self = 1e-12;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite_value(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn exp_value(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln_value(self) -> Self {
                self.ln()
            }
            #[inline]
            fn max_value(self, other: Self) -> Self {
                self.max(other)
            }

            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Strided extents must stay inside the buffers.
                debug_assert!(
                    (m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa < a.len() as isize
                );
                debug_assert!(
                    (k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb < b.len() as isize
                );
                debug_assert!((m - 1) as isize * rsc + (n - 1) as isize * csc < c.len() as isize);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

static GRAPH_EPOCH: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_graph_epoch() -> u64 {
    GRAPH_EPOCH.fetch_add(1, Ordering::Relaxed)
}

pub(crate) type GradSlot<S> = Arc<Mutex<Option<Vec<S>>>>;

/// Dense n-dimensional float array, immutable after creation except for the
/// grad slot of parameter leaves.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    values: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Option<GradSlot<S>>,
    /// `(graph epoch, node id)` when this tensor is an op output.
    pub(crate) ctx: Option<(u64, usize)>,
}

impl<S: Scalar> Tensor<S> {
    fn check_len(shape: &[usize], len: usize) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, len, "shape {shape:?} does not match {len} values");
    }

    /// A constant tensor; gradients never flow into it.
    pub fn from_vec(shape: Vec<usize>, values: Vec<S>) -> Self {
        Self::check_len(&shape, values.len());
        Tensor {
            shape,
            values: Arc::new(values),
            requires_grad: false,
            grad: None,
            ctx: None,
        }
    }

    /// A leaf parameter: `backward` accumulates into its grad slot.
    pub fn param(shape: Vec<usize>, values: Vec<S>) -> Self {
        Self::check_len(&shape, values.len());
        Tensor {
            shape,
            values: Arc::new(values),
            requires_grad: true,
            grad: Some(Arc::new(Mutex::new(None))),
            ctx: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![S::ZERO; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> &Arc<Vec<S>> {
        &self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape);
        self.values[0]
    }

    /// Copy of the accumulated gradient, if any has been deposited.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.grad.as_ref().and_then(|s| s.lock().unwrap().clone())
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<S>> {
        self.grad.as_ref().and_then(|s| s.lock().unwrap().take())
    }

    pub fn zero_grad(&self) {
        if let Some(s) = &self.grad {
            *s.lock().unwrap() = None;
        }
    }

    pub(crate) fn grad_slot(&self) -> Option<&GradSlot<S>> {
        self.grad.as_ref()
    }

    /// In-place update of a leaf's values; panics if a graph still holds the
    /// buffer (graphs are dropped before optimizer steps).
    pub fn update_values(&mut self, f: impl FnOnce(&mut [S])) {
        let vals = Arc::make_mut(&mut self.values);
        f(vals);
    }

    /// Hard error if any element is NaN or Inf.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        check_finite(context, &self.values)
    }

    pub(crate) fn make_output_shared(
        shape: Vec<usize>,
        values: Arc<Vec<S>>,
        ctx: Option<(u64, usize)>,
    ) -> Self {
        Self::check_len(&shape, values.len());
        Tensor {
            shape,
            values,
            requires_grad: ctx.is_some(),
            grad: None,
            ctx,
        }
    }
}

/// Detaches a tensor from the graph: identical values, no gradient linkage.
///
/// Ancestors reachable only through a detached edge receive exactly zero
/// gradient, because the edge is simply absent from the tape.
pub fn stop_gradient<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    Tensor {
        shape: t.shape.clone(),
        values: Arc::clone(&t.values),
        requires_grad: false,
        grad: None,
        ctx: None,
    }
}

/// NaN/Inf sweep: `v - v` is zero for finite values and NaN otherwise, so a
/// single accumulating pass detects any non-finite element.
pub(crate) fn check_finite<S: Scalar>(context: &str, values: &[S]) -> Result<()> {
    let mut acc = S::ZERO;
    for &v in values {
        acc += v - v;
    }
    if acc.is_finite_value() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_gradient_shares_values_bitwise() {
        let t = Tensor::param(vec![3], vec![1.0f32, -2.0, 0.5]);
        let d = stop_gradient(&t);
        assert!(!d.requires_grad());
        assert!(Arc::ptr_eq(t.values_arc(), d.values_arc()));
        for (a, b) in t.values().iter().zip(d.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn finite_check_catches_nan_and_inf() {
        assert!(check_finite("ok", &[1.0f32, 2.0]).is_ok());
        assert!(check_finite("nan", &[1.0f32, f32::NAN]).is_err());
        assert!(check_finite("inf", &[f32::INFINITY]).is_err());
        assert!(check_finite("ninf", &[f32::NEG_INFINITY, 0.0]).is_err());
    }
}
