//! Small dense helpers shared by the density and sampler code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// log|M| from a Cholesky factor.
pub(crate) fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

pub(crate) fn logdet_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    Ok(chol_logdet(&cholesky(m, what)?))
}

pub(crate) fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = cholesky(m, what)?.inverse();
    Ok(symmetrize(&inv))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Symmetric positive-definite check by Cholesky success.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    is_symmetric(m, 1e-10 * scale) && Cholesky::new(m.clone()).is_some()
}
