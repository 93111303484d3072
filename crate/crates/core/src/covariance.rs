//! Base-forecast error covariance estimators: the unbiased sample covariance,
//! the Schäfer–Strimmer shrinkage estimator and the projection weight
//! matrices built on top of them.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::projection::WeightSpec;

/// `T_in x n` in-sample one-step forecast errors, columns ordered like a
/// [`SampleCloud`](crate::SampleCloud).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    residuals: DMatrix<f64>,
}

impl ResidualMatrix {
    pub fn new(residuals: DMatrix<f64>) -> Result<Self> {
        if residuals.nrows() < 2 {
            return Err(ReconError::TooFewRows {
                needed: 2,
                got: residuals.nrows(),
            });
        }
        for j in 0..residuals.ncols() {
            for i in 0..residuals.nrows() {
                if !residuals[(i, j)].is_finite() {
                    return Err(ReconError::NonFinite { row: i, col: j });
                }
            }
        }
        if residuals.nrows() < residuals.ncols() {
            log::warn!(
                "residual matrix has fewer rows ({}) than columns ({})",
                residuals.nrows(),
                residuals.ncols()
            );
        }
        Ok(Self { residuals })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(ReconError::InvalidInput("ragged residual rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
    }

    pub fn t_in(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn n(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    fn centered(&self) -> DMatrix<f64> {
        let mut c = self.residuals.clone();
        for mut col in c.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        c
    }

    fn check_variances(&self, var: &[f64]) -> Result<()> {
        match var.iter().position(|&v| !(v > 0.0)) {
            Some(j) => Err(ReconError::ZeroVariance(j)),
            None => Ok(()),
        }
    }
}

/// Unbiased sample covariance `1/(T-1) sum (r_t - mean)(r_t - mean)'`.
pub fn sample_cov(r: &ResidualMatrix) -> DMatrix<f64> {
    let c = r.centered();
    let s = c.transpose() * &c / (r.t_in() - 1) as f64;
    crate::linalg::symmetrize(&s)
}

/// Shrinkage estimate together with the intensity that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageEstimate {
    pub cov: DMatrix<f64>,
    pub lambda: f64,
}

/// Optimal correlation-shrinkage intensity toward the identity correlation
/// target, clipped to `[0, 1]`; `1` when `T_in < 3`.
pub fn shrinkage_intensity(r: &ResidualMatrix) -> Result<f64> {
    let t = r.t_in();
    let n = r.n();
    let c = r.centered();
    let var: Vec<f64> = c.column_iter().map(|col| col.norm_squared() / (t - 1) as f64).collect();
    r.check_variances(&var)?;
    if t < 3 || n < 2 {
        return Ok(1.0);
    }
    let mut z = c;
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col /= var[j].sqrt();
    }
    let tf = t as f64;
    let mut var_sum = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let w: Vec<f64> = (0..t).map(|k| z[(k, i)] * z[(k, j)]).collect();
            let w_mean = w.iter().sum::<f64>() / tf;
            let r_ij = tf / (tf - 1.0) * w_mean;
            let v_ij = tf / (tf - 1.0).powi(3) * w.iter().map(|x| (x - w_mean).powi(2)).sum::<f64>();
            var_sum += v_ij;
            sq_sum += r_ij * r_ij;
        }
    }
    if sq_sum == 0.0 {
        return Ok(1.0);
    }
    Ok((var_sum / sq_sum).clamp(0.0, 1.0))
}

/// Shrinks the sample correlations toward zero while keeping the sample
/// variances on the diagonal.
pub fn shrink_cov(r: &ResidualMatrix) -> Result<ShrinkageEstimate> {
    let lambda = shrinkage_intensity(r)?;
    let s = sample_cov(r);
    let build = |lambda: f64| {
        let mut out = s.clone();
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                if i != j {
                    out[(i, j)] *= 1.0 - lambda;
                }
            }
        }
        out
    };
    let mut lam = lambda;
    let mut cov = build(lam);
    // a perfectly collinear pair gives lambda = 0 and a singular estimate
    while Cholesky::new(cov.clone()).is_none() {
        lam = if lam < 1e-10 { 1e-10 } else { (lam * 10.0).min(1.0) };
        cov = build(lam);
        if lam >= 1.0 {
            break;
        }
    }
    if lam != lambda {
        log::debug!("shrinkage intensity raised from {lambda:e} to {lam:e} for definiteness");
    }
    Ok(ShrinkageEstimate { cov, lambda: lam })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Ols,
    Wls,
    Full,
}

impl WeightKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightKind::Ols => "ols",
            WeightKind::Wls => "wls",
            WeightKind::Full => "full",
        }
    }
}

impl std::str::FromStr for WeightKind {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(WeightKind::Ols),
            "wls" => Ok(WeightKind::Wls),
            "full" => Ok(WeightKind::Full),
            other => Err(ReconError::Config(format!("unknown weight kind `{other}`"))),
        }
    }
}

/// Projection metric: identity, diagonal of sample variances, or the
/// shrinkage covariance. `r` is ignored for OLS and may be `None`.
pub fn weight_matrix(kind: WeightKind, n: usize, r: Option<&ResidualMatrix>) -> Result<WeightSpec> {
    let need = || r.ok_or_else(|| ReconError::Config(format!("{} weights need residuals", kind.as_str())));
    let w = match kind {
        WeightKind::Ols => DMatrix::identity(n, n),
        WeightKind::Wls => {
            let r = need()?;
            check_width(r, n)?;
            let s = sample_cov(r);
            let var: Vec<f64> = s.diagonal().iter().copied().collect();
            r.check_variances(&var)?;
            DMatrix::from_diagonal(&s.diagonal())
        }
        WeightKind::Full => {
            let r = need()?;
            check_width(r, n)?;
            shrink_cov(r)?.cov
        }
    };
    WeightSpec::new(kind, w)
}

fn check_width(r: &ResidualMatrix, n: usize) -> Result<()> {
    if r.n() != n {
        return Err(ReconError::DimensionMismatch {
            context: "residual columns",
            expected: n,
            got: r.n(),
        });
    }
    Ok(())
}
