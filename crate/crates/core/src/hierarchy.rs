//! Domain types shared by every reconciler, the coherence check and the
//! probabilistic bottom-up baseline.
//!
//! All vectors follow the column ordering `[u_1..u_{n_u}, b_1..b_{n_b}]`:
//! constrained block first, free block last.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constraints::{ConstraintFn, ConstraintSpec};
use crate::error::{ReconError, Result};

/// Default coherence tolerance, relative to `max(1, |y|_inf)`.
pub const DEFAULT_COHERENCE_TOL: f64 = 1e-8;

/// Sizes of the free and constrained blocks plus the map linking them.
#[derive(Debug, Clone)]
pub struct HierarchySpec {
    n_b: usize,
    n_u: usize,
    ftc: ConstraintFn,
}

impl HierarchySpec {
    pub fn new(ftc: ConstraintFn) -> Self {
        Self {
            n_b: ftc.arity_in(),
            n_u: ftc.arity_out(),
            ftc,
        }
    }

    pub fn from_spec(spec: &ConstraintSpec) -> Result<Self> {
        Ok(Self::new(spec.build()?))
    }

    pub fn builtin(name: &str, params: &[f64]) -> Result<Self> {
        Ok(Self::new(ConstraintFn::builtin(name, params)?))
    }

    /// Number of free series.
    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Number of constrained series.
    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n(&self) -> usize {
        self.n_b + self.n_u
    }

    pub fn ftc(&self) -> &ConstraintFn {
        &self.ftc
    }

    /// Free-to-all map: `[f_u(b); b]`.
    pub fn fta(&self, b: &[f64]) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.n());
        self.fta_into(b, y.as_mut_slice())?;
        Ok(y)
    }

    pub fn fta_into(&self, b: &[f64], y: &mut [f64]) -> Result<()> {
        if y.len() != self.n() {
            return Err(ReconError::DimensionMismatch {
                context: "fta output",
                expected: self.n(),
                got: y.len(),
            });
        }
        let (u, free) = y.split_at_mut(self.n_u);
        self.ftc.eval_into(b, u)?;
        free.copy_from_slice(b);
        Ok(())
    }

    /// Applies `fta` to every row of an `M x n_b` matrix of free samples.
    pub fn fta_rows(&self, free: &DMatrix<f64>) -> Result<SampleCloud> {
        if free.ncols() != self.n_b {
            return Err(ReconError::DimensionMismatch {
                context: "free samples",
                expected: self.n_b,
                got: free.ncols(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..free.nrows())
            .into_par_iter()
            .map(|i| {
                let b: Vec<f64> = free.row(i).iter().copied().collect();
                let mut y = vec![0.0; self.n()];
                self.fta_into(&b, &mut y).map_err(|e| ReconError::RowFailure {
                    row: i,
                    source: Box::new(e),
                })?;
                Ok(y)
            })
            .collect::<Result<_>>()?;
        SampleCloud::from_rows(&rows)
    }

    fn check_cloud(&self, cloud: &SampleCloud) -> Result<()> {
        if cloud.n() != self.n() {
            return Err(ReconError::DimensionMismatch {
                context: "cloud columns",
                expected: self.n(),
                got: cloud.n(),
            });
        }
        Ok(())
    }
}

/// `M x n` matrix of forecast samples, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    samples: DMatrix<f64>,
}

impl SampleCloud {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() < 2 {
            return Err(ReconError::TooFewRows {
                needed: 2,
                got: samples.nrows(),
            });
        }
        if samples.ncols() == 0 {
            return Err(ReconError::InvalidInput("cloud has no columns".into()));
        }
        for j in 0..samples.ncols() {
            for i in 0..samples.nrows() {
                if !samples[(i, j)].is_finite() {
                    return Err(ReconError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(ReconError::InvalidInput(format!(
                "row {i} has {} values, expected {n}",
                r.len()
            )));
        }
        Self::new(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
    }

    /// Number of samples.
    pub fn m(&self) -> usize {
        self.samples.nrows()
    }

    /// Number of series.
    pub fn n(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.samples
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.samples.row(i).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m()).map(|i| self.row(i)).collect()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let m = self.m();
        &self.samples.as_slice()[j * m..(j + 1) * m]
    }

    /// Columns `n_u..n`.
    pub fn free_block(&self, n_u: usize) -> DMatrix<f64> {
        self.samples.columns(n_u, self.n() - n_u).into_owned()
    }

    /// Columns `0..n_u`.
    pub fn constrained_block(&self, n_u: usize) -> DMatrix<f64> {
        self.samples.columns(0, n_u).into_owned()
    }

    pub fn column_means(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            (0..self.n()).map(|j| self.column(j).iter().sum::<f64>() / self.m() as f64),
        )
    }
}

/// Multivariate normal described by its first two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(ReconError::DimensionMismatch {
                context: "gaussian covariance",
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(ReconError::InvalidInput("non-finite gaussian moments".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-10 {
            return Err(ReconError::InvalidInput("covariance is not symmetric".into()));
        }
        if d > 0 {
            let floor = -1e-8 * cov.trace().abs() / d as f64;
            let min_eig = cov.clone().symmetric_eigenvalues().min();
            if min_eig < floor {
                return Err(ReconError::NotPositiveDefinite(format!(
                    "covariance has eigenvalue {min_eig:e}"
                )));
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Sample-level coherence summary.
///
/// Residuals are `|u - f_u(b)|_inf / max(1, |y|_inf)` per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceReport {
    pub max_residual: f64,
    pub frac_coherent: f64,
    pub tol: f64,
}

impl CoherenceReport {
    pub fn is_coherent(&self) -> bool {
        self.frac_coherent == 1.0
    }
}

/// Free-to-all map `[f_u(b); b]`.
pub fn fta(spec: &HierarchySpec, b: &[f64]) -> Result<DVector<f64>> {
    spec.fta(b)
}

/// Relative coherence residual of a single vector.
pub fn coherence_residual(spec: &HierarchySpec, y: &[f64]) -> Result<f64> {
    let (u, b) = y.split_at(spec.n_u());
    let fu = spec.ftc().eval(b)?;
    let abs = u.iter().zip(fu.iter()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    let scale = y.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    Ok(abs / scale)
}

pub fn coherence_check(spec: &HierarchySpec, cloud: &SampleCloud, tol: f64) -> Result<CoherenceReport> {
    if !(tol > 0.0) {
        return Err(ReconError::InvalidInput(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    spec.check_cloud(cloud)?;
    let residuals: Vec<f64> = (0..cloud.m())
        .into_par_iter()
        .map(|i| {
            coherence_residual(spec, &cloud.row(i)).map_err(|e| ReconError::RowFailure {
                row: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    let coherent = residuals.iter().filter(|&&r| r <= tol).count();
    Ok(CoherenceReport {
        max_residual,
        frac_coherent: coherent as f64 / cloud.m() as f64,
        tol,
    })
}

/// Probabilistic bottom-up: keep free samples, recompute the constrained block.
pub fn pbu_reconcile(spec: &HierarchySpec, base: &SampleCloud) -> Result<SampleCloud> {
    spec.check_cloud(base)?;
    spec.fta_rows(&base.free_block(spec.n_u()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn spec(name: &str) -> HierarchySpec {
        HierarchySpec::builtin(name, &[]).unwrap()
    }

    fn ratio_cloud(m: usize, seed: u64) -> SampleCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let x: f64 = rng.random_range(1.0..5.0);
                let y: f64 = rng.random_range(1.0..5.0);
                let u: f64 = rng.random_range(-1.0..1.0);
                vec![u, x, y]
            })
            .collect();
        SampleCloud::from_rows(&rows).unwrap()
    }

    #[test]
    fn fta_examples() {
        assert_eq!(spec("ratio").fta(&[4.0, 2.0]).unwrap().as_slice(), &[2.0, 4.0, 2.0]);
        assert_eq!(spec("paraboloid").fta(&[0.0, 0.0]).unwrap().as_slice(), &[0.0; 3]);
        let expected_u = 3.0_f64 * 3.0 - 2.0 * 2.0;
        assert_eq!(
            spec("saddle").fta(&[3.0, 2.0]).unwrap().as_slice(),
            &[expected_u, 3.0, 2.0]
        );
    }

    #[test]
    fn fta_reports_offending_input() {
        match spec("ratio").fta(&[1.0, 0.0]) {
            Err(ReconError::Domain { input, .. }) => assert_eq!(input, vec![1.0, 0.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cloud_requires_two_finite_rows() {
        assert!(SampleCloud::from_rows(&[vec![1.0, 2.0]]).is_err());
        assert!(matches!(
            SampleCloud::from_rows(&[vec![1.0, 2.0], vec![f64::NAN, 0.0]]),
            Err(ReconError::NonFinite { row: 1, col: 0 })
        ));
    }

    #[test]
    fn pbu_is_coherent_and_keeps_free_block() {
        let s = spec("ratio");
        let base = ratio_cloud(1000, 1);
        let out = pbu_reconcile(&s, &base).unwrap();
        let report = coherence_check(&s, &out, 1e-10).unwrap();
        assert_eq!(report.frac_coherent, 1.0);
        assert_eq!(out.free_block(1), base.free_block(1));
    }

    #[test]
    fn pbu_replaces_constrained_values() {
        let s = spec("paraboloid");
        let base = SampleCloud::from_rows(&[vec![99.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let out = pbu_reconcile(&s, &base).unwrap();
        assert_eq!(out.row(0), vec![5.0, 1.0, 2.0]);
        assert_eq!(out.row(1), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn pbu_on_coherent_cloud_is_identity() {
        let s = spec("saddle");
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                s.fta(&[i as f64 * 0.1, 1.0 - i as f64 * 0.05])
                    .unwrap()
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let base = SampleCloud::from_rows(&rows).unwrap();
        assert_eq!(pbu_reconcile(&s, &base).unwrap(), base);
    }

    #[test]
    fn noisy_constrained_block_is_incoherent() {
        let s = spec("ratio");
        let coherent = pbu_reconcile(&s, &ratio_cloud(500, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noisy = coherent.into_inner();
        for i in 0..noisy.nrows() {
            let e: f64 = rng.sample(StandardNormal);
            noisy[(i, 0)] += e;
        }
        let report = coherence_check(&s, &SampleCloud::new(noisy).unwrap(), 1e-8).unwrap();
        assert!(report.frac_coherent < 0.01);
        assert!(report.max_residual > 1e-8);
    }

    #[test]
    fn repeated_coherent_point() {
        let s = spec("ripples");
        let y = s.fta(&[0.3, -0.7]).unwrap();
        let rows = vec![y.as_slice().to_vec(); 10];
        let report = coherence_check(&s, &SampleCloud::from_rows(&rows).unwrap(), 1e-12).unwrap();
        assert!(report.max_residual <= 1e-12);
        assert!(report.is_coherent());
    }

    #[test]
    fn coherence_check_validates_inputs() {
        let s = spec("ratio");
        let cloud = ratio_cloud(5, 4);
        assert!(coherence_check(&s, &cloud, 0.0).is_err());
        let wide = SampleCloud::from_rows(&[vec![0.0; 4], vec![0.0; 4]]).unwrap();
        assert!(matches!(
            coherence_check(&s, &wide, 1e-8),
            Err(ReconError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gaussian_validation() {
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        assert!(GaussianDist::new(mean.clone(), DMatrix::identity(2, 2)).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianDist::new(mean.clone(), asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianDist::new(mean.clone(), indef).is_err());
        assert!(GaussianDist::new(mean, DMatrix::zeros(2, 2)).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn fta_keeps_free_block(b0 in -10.0..10.0f64, b1 in -10.0..10.0f64) {
            for name in ["paraboloid", "saddle", "ripples"] {
                let y = spec(name).fta(&[b0, b1]).unwrap();
                proptest::prop_assert_eq!(&y.as_slice()[1..], &[b0, b1][..]);
            }
        }

        #[test]
        fn pbu_is_idempotent(seed in proptest::prelude::any::<u64>()) {
            let s = spec("ratio");
            let base = ratio_cloud(50, seed);
            let once = pbu_reconcile(&s, &base).unwrap();
            let twice = pbu_reconcile(&s, &once).unwrap();
            proptest::prop_assert_eq!(&once, &twice);
            let report = coherence_check(&s, &once, 1e-10).unwrap();
            proptest::prop_assert_eq!(report.frac_coherent, 1.0);
        }
    }
}
