//! Dense matrix helpers shared by the topology and sensitivity modules.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralNormError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("power iteration did not converge; last estimate {estimate}")]
    NoConvergence { estimate: f64 },
}

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Largest singular value by power iteration on `M^T M`.
///
/// Converged once the eigen-residual `|G v - rho v|` falls below `1e-10 rho`;
/// unlike a test on successive Rayleigh quotients this does not stall early
/// when the two leading singular values are close.
pub fn spectral_norm(m: ArrayView2<f64>) -> Result<f64, SpectralNormError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SpectralNormError::NonFinite);
    }
    let cols = m.ncols();
    if m.nrows() == 0 || cols == 0 {
        return Ok(0.0);
    }
    let gram = m.t().dot(&m);
    if gram.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    // Fixed, non-symmetric start so that no coordinate direction is favoured.
    let mut v = Array1::from_shape_fn(cols, |k| 1.0 + ((k as f64 + 1.0) * 0.618_033_988_75).fract());
    v /= v.dot(&v).sqrt();
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = gram.dot(&v);
        estimate = v.dot(&w);
        let residual = (&w - &(estimate * &v)).dot(&(&w - &(estimate * &v))).sqrt();
        if residual <= POWER_TOLERANCE * estimate.abs() {
            return Ok(estimate.max(0.0).sqrt());
        }
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
    }
    Err(SpectralNormError::NoConvergence {
        estimate: estimate.max(0.0).sqrt(),
    })
}

/// `m^k` by repeated multiplication; `m^0` is the identity.
pub fn matrix_power(m: &Array2<f64>, k: usize) -> Array2<f64> {
    let mut acc = Array2::eye(m.nrows());
    for _ in 0..k {
        acc = acc.dot(m);
    }
    acc
}

pub fn is_lower_triangular(m: &Array2<f64>) -> bool {
    m.is_square() && m.indexed_iter().all(|((i, j), &v)| i >= j || v == 0.0)
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute row sum (the induced infinity norm).
pub fn inf_norm(m: ArrayView2<f64>) -> f64 {
    m.outer_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn power_zero_is_identity() {
        let m = array![[2.0, 1.0], [0.0, 3.0]];
        assert_eq!(matrix_power(&m, 0), Array2::<f64>::eye(2));
        assert_eq!(matrix_power(&m, 2), array![[4.0, 5.0], [0.0, 9.0]]);
    }

    #[test]
    fn triangularity() {
        assert!(is_lower_triangular(&array![[1.0, 0.0], [5.0, 1.0]]));
        assert!(!is_lower_triangular(&array![[1.0, 2.0], [0.0, 1.0]]));
        assert!(!is_lower_triangular(&Array2::<f64>::zeros((2, 3))));
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(Array2::<f64>::eye(4).view()).unwrap() - 1.0).abs() < 1e-14);
        let d = array![[3.0, 0.0], [0.0, -5.0]];
        assert!((spectral_norm(d.view()).unwrap() - 5.0).abs() < 1e-12);
        let n = array![[0.0, 2.0], [0.0, 0.0]];
        assert!((spectral_norm(n.view()).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(spectral_norm(Array2::<f64>::zeros((3, 2)).view()).unwrap(), 0.0);
        let bad = array![[f64::NAN]];
        assert_eq!(spectral_norm(bad.view()), Err(SpectralNormError::NonFinite));
    }

    #[test]
    fn norms() {
        let m = array![[1.0, -2.0], [0.5, 0.5]];
        assert_eq!(inf_norm(m.view()), 3.0);
        assert_eq!(max_abs_diff(m.view(), Array2::<f64>::zeros((2, 2)).view()), 2.0);
    }
}
