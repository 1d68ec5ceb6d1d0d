//! Dense linear algebra, activations, optimizers and a finite-difference
//! gradient checker. Everything is `f64`.

mod matrix;
mod optim;

pub use matrix::{axpy, dot, norm, Matrix};
pub use optim::{optimizer_step, OptimizerKind, OptimizerSet, OptimizerState, ADAM_BETA1, ADAM_BETA2};

use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-12;

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity with an epsilon-guarded denominator, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

#[inline]
pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b) + COSINE_EPS);
    c.clamp(-1.0, 1.0)
}

/// Compare `analytic` against central differences of `loss` around `params`.
///
/// Returns the maximum over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &Matrix,
    analytic: &Matrix,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&Matrix) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Numerical(format!("step size must be positive, got {h}")));
    }
    params.ensure_shape(analytic, "finite difference params/grads")?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = loss(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = loss(&probe);
        probe.as_mut_slice()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
