//! Small dense helpers shared by the estimators and the sampler.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a matrix is treated as singular.
pub const SINGULAR_RTOL: f64 = 1e-10;

/// Cholesky factorization; on failure adds `1e-12 * trace / dim` to the
/// diagonal and retries once.
pub fn cholesky_with_jitter(m: DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let dim = m.nrows();
    let jitter = 1e-12 * m.trace().abs() / dim.max(1) as f64;
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let mut m = m;
            for k in 0..dim {
                m[(k, k)] += jitter;
            }
            Cholesky::new(m).ok_or(Error::NotPositiveDefinite(what))
        }
    }
}

/// Eigen-decomposition after explicit symmetrization.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

pub fn eigen_extremes(values: &DVector<f64>) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// `m^{-1/2}` for a symmetric positive definite `m`.
pub fn inverse_sqrt_spd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(m);
    let (lo, hi) = eigen_extremes(&eig.eigenvalues);
    if !(hi > 0.0) || lo <= SINGULAR_RTOL * hi {
        return Err(Error::NotPositiveDefinite(what));
    }
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose())
}
