//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use nlrecon::conditioning::sample_posterior;
use nlrecon::experiment::{run_simulation, SimulationConfig};
use nlrecon::{
    coherence_check, crps as crps_impl, energy_score as es_impl, pbu_reconcile, project_cloud, shrink_cov,
    ukf_reconcile as ukf_impl, weight_matrix, GaussianDist, ProjectionConfig, ReconError, ResidualMatrix, SampleCloud,
    UTParams, WeightKind,
};

fn err(e: ReconError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn cloud(rows: &[Vec<f64>]) -> PyResult<SampleCloud> {
    SampleCloud::from_rows(rows).map_err(err)
}

fn residuals(rows: Option<Vec<Vec<f64>>>) -> PyResult<Option<ResidualMatrix>> {
    rows.map(|r| ResidualMatrix::from_rows(&r).map_err(err)).transpose()
}

/// Constraint `u = f_u(b)` with vectors ordered `[u..., b...]`.
#[pyclass(frozen)]
struct HierarchySpec {
    inner: nlrecon::HierarchySpec,
}

#[pymethods]
impl HierarchySpec {
    #[new]
    #[pyo3(signature = (name, params = Vec::new()))]
    fn new(name: &str, params: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: nlrecon::HierarchySpec::builtin(name, &params).map_err(err)?,
        })
    }

    #[getter]
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }

    #[getter]
    fn n_b(&self) -> usize {
        self.inner.n_b()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.ftc().name().to_string()
    }

    /// `[f_u(b); b]`.
    fn fta(&self, b: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.fta(&b).map_err(err)?.as_slice().to_vec())
    }

    fn jacobian(&self, b: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.ftc().eval_jacobian(&b).map_err(err)?))
    }

    /// `(max_residual, frac_coherent)`.
    #[pyo3(signature = (cloud_rows, tol = 1e-8))]
    fn coherence(&self, cloud_rows: Vec<Vec<f64>>, tol: f64) -> PyResult<(f64, f64)> {
        let r = coherence_check(&self.inner, &cloud(&cloud_rows)?, tol).map_err(err)?;
        Ok((r.max_residual, r.frac_coherent))
    }

    /// Keeps the free block and recomputes the constrained block.
    fn pbu(&self, cloud_rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = pbu_reconcile(&self.inner, &cloud(&cloud_rows)?).map_err(err)?;
        Ok(to_rows(out.samples()))
    }

    /// Nearest-point projection of every row; returns `(rows, fallback_count)`.
    #[pyo3(signature = (cloud_rows, weights = "ols", residual_rows = None, max_iter = 100, grad_tol = 1e-10))]
    fn project(
        &self,
        cloud_rows: Vec<Vec<f64>>,
        weights: &str,
        residual_rows: Option<Vec<Vec<f64>>>,
        max_iter: usize,
        grad_tol: f64,
    ) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let kind: WeightKind = weights.parse().map_err(err)?;
        let r = residuals(residual_rows)?;
        let w = weight_matrix(kind, self.inner.n(), r.as_ref()).map_err(err)?;
        let cfg = ProjectionConfig {
            max_iter,
            grad_tol,
            ..Default::default()
        };
        let (out, diag) = project_cloud(&self.inner, &w, &cloud(&cloud_rows)?, &cfg).map_err(err)?;
        Ok((to_rows(out.samples()), diag.fallback_count))
    }

    /// Unscented update of a Gaussian prior on the free block given the
    /// constrained forecast `u_hat` with covariance `sigma_u`.
    /// Returns `(posterior_mean, posterior_cov, gain)`.
    #[pyo3(signature = (prior_mean, prior_cov, u_hat, sigma_u, alpha = 0.1, beta = 2.0, kappa = None))]
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn ukf_reconcile(
        &self,
        prior_mean: Vec<f64>,
        prior_cov: Vec<Vec<f64>>,
        u_hat: Vec<f64>,
        sigma_u: Vec<Vec<f64>>,
        alpha: f64,
        beta: f64,
        kappa: Option<f64>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let res = self.ukf(prior_mean, prior_cov, u_hat, sigma_u, UTParams { alpha, beta, kappa })?;
        Ok((
            res.posterior.mean().as_slice().to_vec(),
            to_rows(res.posterior.cov()),
            to_rows(&res.gain),
        ))
    }

    /// Unscented update followed by `m` coherent posterior draws.
    #[pyo3(signature = (prior_mean, prior_cov, u_hat, sigma_u, m, seed = 0))]
    fn ukf_sample(
        &self,
        prior_mean: Vec<f64>,
        prior_cov: Vec<Vec<f64>>,
        u_hat: Vec<f64>,
        sigma_u: Vec<Vec<f64>>,
        m: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let res = self.ukf(prior_mean, prior_cov, u_hat, sigma_u, UTParams::default())?;
        let out = sample_posterior(&res, &self.inner, m, seed).map_err(err)?;
        Ok(to_rows(out.samples()))
    }

    fn __repr__(&self) -> String {
        format!(
            "HierarchySpec('{}', n_u={}, n_b={})",
            self.inner.ftc().name(),
            self.inner.n_u(),
            self.inner.n_b()
        )
    }
}

impl HierarchySpec {
    fn ukf(
        &self,
        prior_mean: Vec<f64>,
        prior_cov: Vec<Vec<f64>>,
        u_hat: Vec<f64>,
        sigma_u: Vec<Vec<f64>>,
        params: UTParams,
    ) -> PyResult<nlrecon::UKFResult> {
        let prior = GaussianDist::new(DVector::from_vec(prior_mean), matrix(&prior_cov, "prior_cov")?).map_err(err)?;
        ukf_impl(
            &self.inner,
            &prior,
            &DVector::from_vec(u_hat),
            &matrix(&sigma_u, "sigma_u")?,
            &params,
        )
        .map_err(err)
    }
}

#[pyfunction]
fn energy_score(cloud_rows: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<f64> {
    es_impl(&cloud(&cloud_rows)?, &y).map_err(err)
}

#[pyfunction]
fn crps(samples: Vec<f64>, y: f64) -> PyResult<f64> {
    crps_impl(&samples, y).map_err(err)
}

/// `(covariance, lambda)` of the shrinkage estimator.
#[pyfunction]
fn shrinkage_cov(residual_rows: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let r = ResidualMatrix::from_rows(&residual_rows).map_err(err)?;
    let est = shrink_cov(&r).map_err(err)?;
    Ok((to_rows(&est.cov), est.lambda))
}

/// Runs the synthetic study from a JSON config; returns the cells as JSON.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn simulate(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: SimulationConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py.detach(|| run_simulation(&cfg)).map_err(err)?;
    serde_json::to_string(&out).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pynlrecon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<HierarchySpec>()?;
    m.add_function(wrap_pyfunction!(energy_score, m)?)?;
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(shrinkage_cov, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
