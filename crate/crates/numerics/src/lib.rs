//! Dense row-major tensors, the read-only attention kernel, and a small
//! reverse-mode differentiation graph whose trainable leaves are registered
//! explicitly.
//!
//! Everything is generic over [`Real`], so the same code runs in 32-bit for
//! training and inference and in 64-bit for gradient verification.

mod attention;
mod error;
mod graph;
mod real;
mod tensor;

pub use attention::{attention_masked, AttentionMask};
pub use error::{NumericsError, Result};
pub use graph::{Graph, NodeId};
pub use real::Real;
pub use tensor::Tensor;

/// Cosine similarity `u·v / (‖u‖‖v‖)` between two equal-length vectors.
pub fn cosine_sim<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_sim",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot = dot + a * b;
        nu = nu + a * a;
        nv = nv + b * b;
    }
    if nu == T::zero() || nv == T::zero() {
        return Err(NumericsError::ZeroNorm { op: "cosine_sim" });
    }
    let s = dot / (nu.sqrt() * nv.sqrt());
    // rounding can push |s| a hair past 1
    Ok(s.max(-T::one()).min(T::one()))
}

/// Central finite-difference gradient of a scalar function.
///
/// Each coordinate is perturbed by `±eps` in turn; `f` must be deterministic.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(NumericsError::InvalidArgument("eps must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((up - down) / two_eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
