//! Reconciliation by push-forward under the nearest-point map onto the
//! coherent manifold.
//!
//! Each sample `y` is replaced by `fta(b*)` where `b*` minimizes the
//! Mahalanobis distance `g(b) = (y - f(b))' W^-1 (y - f(b))`. The minimization
//! is a Levenberg-damped Gauss-Newton iteration with backtracking, started
//! from the free block of `y`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::WeightKind;
use crate::error::{ReconError, Result};
use crate::hierarchy::{HierarchySpec, SampleCloud};

/// Projection metric `W` with its precomputed whitening factor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    kind: WeightKind,
    w: DMatrix<f64>,
    /// Lower-triangular `L^-1` where `W = L L'`, so `W^-1 = L^-T L^-1`.
    whitener: DMatrix<f64>,
}

impl WeightSpec {
    pub fn new(kind: WeightKind, w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(ReconError::InvalidInput("weight matrix must be square".into()));
        }
        if (&w - w.transpose()).amax() > 1e-10 * w.amax().max(1.0) {
            return Err(ReconError::InvalidInput("weight matrix is not symmetric".into()));
        }
        let chol = Cholesky::new(w.clone()).ok_or_else(|| ReconError::NotPositiveDefinite("weight matrix".into()))?;
        let n = w.nrows();
        let whitener = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| ReconError::NotPositiveDefinite("weight matrix factor".into()))?;
        Ok(Self { kind, w, whitener })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(WeightKind::Ols, DMatrix::identity(n, n)).expect("identity is PD")
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `sqrt(x' W^-1 x)`.
    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        (&self.whitener * x).norm()
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub damping: f64,
    pub line_search_shrink: f64,
    pub max_backtracks: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-10,
            step_tol: 1e-12,
            damping: 1e-3,
            line_search_shrink: 0.5,
            max_backtracks: 25,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.grad_tol, self.step_tol, self.damping, self.line_search_shrink];
        if self.max_iter < 1 || positive.iter().any(|v| !(*v > 0.0)) || self.line_search_shrink >= 1.0 {
            return Err(ReconError::Config(format!("invalid projection config {self:?}")));
        }
        Ok(())
    }
}

/// Outcome of a single projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProjection {
    pub b_star: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub grad_norm: f64,
    pub fell_back: bool,
}

/// Per-row solver diagnostics for a projected cloud.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionDiagnostics {
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub objective: Vec<f64>,
    pub fallback_count: usize,
}

impl ProjectionDiagnostics {
    pub fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }
}

struct Problem<'a> {
    spec: &'a HierarchySpec,
    weights: &'a WeightSpec,
    y_hat: &'a [f64],
}

struct Eval {
    objective: f64,
    /// whitened residual `L^-1 (y - f(b))`
    resid: DVector<f64>,
}

impl Problem<'_> {
    fn eval(&self, b: &[f64]) -> Result<Eval> {
        let mut f = vec![0.0; self.spec.n()];
        self.spec.fta_into(b, &mut f)?;
        let raw = DVector::from_iterator(f.len(), self.y_hat.iter().zip(&f).map(|(y, fy)| y - fy));
        let resid = self.weights.whitener() * raw;
        Ok(Eval {
            objective: resid.norm_squared(),
            resid,
        })
    }

    fn gradient_norm(&self, b: &[f64], at: &Eval) -> f64 {
        self.jacobian(b)
            .map_or(f64::INFINITY, |j| (j.transpose() * &at.resid).norm())
    }

    /// Whitened Jacobian `L^-1 [J_u; I]`.
    fn jacobian(&self, b: &[f64]) -> Result<DMatrix<f64>> {
        let n_u = self.spec.n_u();
        let n_b = self.spec.n_b();
        let ju = self.spec.ftc().eval_jacobian(b)?;
        let mut jf = DMatrix::zeros(n_u + n_b, n_b);
        jf.rows_mut(0, n_u).copy_from(&ju);
        jf.rows_mut(n_u, n_b).fill_with_identity();
        Ok(self.weights.whitener() * jf)
    }
}

/// Nearest point on the manifold to `y_hat` under `W`, as its free block.
///
/// Samples that do not reach stationarity fall back to the free block of
/// `y_hat` (the bottom-up answer) and are flagged in the result.
pub fn project_point(
    spec: &HierarchySpec,
    weights: &WeightSpec,
    y_hat: &[f64],
    cfg: &ProjectionConfig,
) -> Result<PointProjection> {
    if y_hat.len() != spec.n() {
        return Err(ReconError::DimensionMismatch {
            context: "projection input",
            expected: spec.n(),
            got: y_hat.len(),
        });
    }
    if weights.dim() != spec.n() {
        return Err(ReconError::DimensionMismatch {
            context: "weight matrix",
            expected: spec.n(),
            got: weights.dim(),
        });
    }
    if y_hat.iter().any(|v| !v.is_finite()) {
        return Err(ReconError::InvalidInput("non-finite projection input".into()));
    }
    let problem = Problem { spec, weights, y_hat };
    let n_b = spec.n_b();
    let start = DVector::from_column_slice(&y_hat[spec.n_u()..]);
    let mut b = start.clone();
    let mut current = problem.eval(b.as_slice())?;
    let mut mu = cfg.damping;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;

    while iterations <= cfg.max_iter {
        let jac = match problem.jacobian(b.as_slice()) {
            Ok(j) => j,
            Err(_) => break,
        };
        let rhs = jac.transpose() * &current.resid;
        grad_norm = rhs.norm();
        if grad_norm <= cfg.grad_tol * current.objective.max(1.0) {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        iterations += 1;

        let jtj = jac.transpose() * &jac;
        let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        let mut stalled = false;
        // objective differences below this are rounding noise
        let slack = 8.0 * f64::EPSILON * current.objective;
        // escalate damping until a descent step is found
        for attempt in 0..8 {
            let mut lhs = jtj.clone();
            for i in 0..n_b {
                lhs[(i, i)] += mu * scale;
            }
            let Some(chol) = Cholesky::new(lhs) else {
                mu *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let mut t = 1.0;
            for _ in 0..=cfg.max_backtracks {
                let step = &delta * t;
                if step.norm() <= cfg.step_tol * (1.0 + b.norm()) {
                    // a tiny full step at low damping means b is stationary
                    converged = attempt == 0 && t == 1.0 && mu <= cfg.damping;
                    stalled = true;
                    break;
                }
                let trial = &b + &step;
                if let Ok(e) = problem.eval(trial.as_slice()) {
                    // near the minimum the objective is lost in rounding; a full
                    // step that reduces the gradient is accepted instead
                    let descends = e.objective <= current.objective + slack
                        || (t == 1.0
                            && e.objective <= current.objective * (1.0 + 1e-10)
                            && problem.gradient_norm(trial.as_slice(), &e) < grad_norm);
                    if descends {
                        b = trial;
                        current = e;
                        accepted = true;
                        break;
                    }
                }
                t *= cfg.line_search_shrink;
            }
            if accepted || stalled {
                break;
            }
            mu *= 10.0;
        }
        if converged {
            break;
        }
        if accepted {
            mu = (mu / 10.0).max(1e-15);
        } else {
            // no descent available from here; stationarity decides the outcome
            if let Ok(jac) = problem.jacobian(b.as_slice()) {
                grad_norm = (jac.transpose() * &current.resid).norm();
                converged = grad_norm <= cfg.grad_tol * current.objective.max(1.0);
            }
            break;
        }
    }

    if converged {
        Ok(PointProjection {
            b_star: b,
            iterations,
            converged,
            objective: current.objective,
            grad_norm,
            fell_back: false,
        })
    } else {
        let objective = problem.eval(start.as_slice())?.objective;
        Ok(PointProjection {
            b_star: start,
            iterations,
            converged,
            objective,
            grad_norm,
            fell_back: true,
        })
    }
}

/// Projects every row of `base`; row order is preserved.
///
/// Fails only when more than half of the rows fall back to bottom-up.
pub fn project_cloud(
    spec: &HierarchySpec,
    weights: &WeightSpec,
    base: &SampleCloud,
    cfg: &ProjectionConfig,
) -> Result<(SampleCloud, ProjectionDiagnostics)> {
    cfg.validate()?;
    if base.n() != spec.n() {
        return Err(ReconError::DimensionMismatch {
            context: "cloud columns",
            expected: spec.n(),
            got: base.n(),
        });
    }
    let results: Vec<(Vec<f64>, PointProjection)> = (0..base.m())
        .into_par_iter()
        .map(|i| {
            let wrap = |e| ReconError::RowFailure {
                row: i,
                source: Box::new(e),
            };
            let proj = project_point(spec, weights, &base.row(i), cfg).map_err(wrap)?;
            let y = spec.fta(proj.b_star.as_slice()).map_err(wrap)?;
            Ok((y.as_slice().to_vec(), proj))
        })
        .collect::<Result<_>>()?;

    let mut diag = ProjectionDiagnostics::default();
    let mut rows = Vec::with_capacity(results.len());
    for (y, p) in results {
        diag.iterations.push(p.iterations);
        diag.converged.push(p.converged);
        diag.objective.push(p.objective);
        diag.fallback_count += usize::from(p.fell_back);
        rows.push(y);
    }
    if diag.fallback_count > 0 {
        log::warn!(
            "projection fell back to bottom-up on {} of {} samples",
            diag.fallback_count,
            base.m()
        );
    }
    if 2 * diag.fallback_count > base.m() {
        return Err(ReconError::ProjectionFailed {
            fallbacks: diag.fallback_count,
            total: base.m(),
        });
    }
    Ok((SampleCloud::from_rows(&rows)?, diag))
}
