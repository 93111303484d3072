//! Small dense helpers shared by the estimators and reconcilers.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{ReconError, Result};

/// Relative diagonal jitter used when a factorization fails.
pub const JITTER: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn mean_diag(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        0.0
    } else {
        m.trace() / m.nrows() as f64
    }
}

/// Cholesky factorization; on failure retries once with `JITTER * trace / d`
/// added to the diagonal.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let jitter = JITTER * mean_diag(m).abs();
    if jitter > 0.0 {
        let mut shifted = m.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            log::debug!("{what}: Cholesky needed jitter {jitter:e}");
            return Ok(c);
        }
    }
    Err(ReconError::NotPositiveDefinite(what.to_string()))
}

/// Lower factor `L` with `L L' ~= m` for a positive semidefinite `m`.
///
/// Tries Cholesky with escalating diagonal jitter, then falls back to the
/// eigen-decomposition with negative eigenvalues floored at zero. A zero
/// matrix yields a zero factor.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let m = symmetrize(m);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ReconError::NotPositiveDefinite(format!("{what}: non-finite entries")));
    }
    let scale = mean_diag(&m);
    if scale < 0.0 {
        return Err(ReconError::NotPositiveDefinite(format!("{what}: negative trace")));
    }
    if m.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let mut jitter = JITTER * scale;
    for _ in 0..4 {
        let mut shifted = m.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    let eig = m.clone().symmetric_eigen();
    let min_allowed = -1e-8 * scale;
    if eig.eigenvalues.iter().any(|&l| l < min_allowed) {
        return Err(ReconError::NotPositiveDefinite(format!(
            "{what}: eigenvalue {:e} below tolerance",
            eig.eigenvalues.min()
        )));
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}
