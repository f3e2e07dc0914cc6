//! Finite-difference gradient oracles.
//!
//! These helpers evaluate functions forward-only, so they stay independent of
//! the tape's backward rules they are used to check.

use crate::scalar::Scalar;

/// Central-difference derivative of `f` with respect to one coordinate.
pub fn central_diff<F: Scalar>(mut f: impl FnMut(F) -> F, x0: F, eps: F) -> F {
    let two = F::from_f64(2.0);
    (f(x0 + eps) - f(x0 - eps)) / (two * eps)
}

/// Full central-difference gradient of a scalar function of a flat buffer.
pub fn numerical_grad<F: Scalar>(mut f: impl FnMut(&[F]) -> F, point: &[F], eps: F) -> Vec<F> {
    let mut work = point.to_vec();
    let two = F::from_f64(2.0);
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = point[i];
        work[i] = x0 + eps;
        let up = f(&work);
        work[i] = x0 - eps;
        let down = f(&work);
        work[i] = x0;
        grad.push((up - down) / (two * eps));
    }
    grad
}

/// Relative error with a small absolute floor so that near-zero pairs compare
/// on an absolute scale.
pub fn rel_err<F: Scalar>(analytic: F, numeric: F) -> f64 {
    let a = analytic.as_f64();
    let n = numeric.as_f64();
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Largest pairwise relative error between two gradient vectors.
pub fn max_rel_err<F: Scalar>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
