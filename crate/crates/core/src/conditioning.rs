//! Reconciliation by conditioning, approximated with the Unscented Transform.
//!
//! The free-series base forecast is taken as `N(b_hat, Sigma_B)` and the
//! constrained base forecast mean `u_hat` as a noisy observation of
//! `f_u(B)` with noise covariance `Sigma_U`. Sigma points give a Gaussian
//! approximation of the joint law of `(B, U)`, which is then conditioned on
//! `U = u_hat` with a Kalman-style update. Coherent samples are obtained by
//! drawing from the posterior and applying the free-to-all map.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{shrink_cov, ResidualMatrix};
use crate::error::{ReconError, Result};
use crate::hierarchy::{GaussianDist, HierarchySpec, SampleCloud};
use crate::linalg::{cholesky_jittered, psd_factor, symmetrize};

/// Scaling parameters of the sigma-point set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UTParams {
    pub alpha: f64,
    pub beta: f64,
    /// `None` selects `3 - n_b`.
    pub kappa: Option<f64>,
}

impl Default for UTParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            kappa: None,
        }
    }
}

impl UTParams {
    pub fn kappa_for(&self, n_b: usize) -> f64 {
        self.kappa.unwrap_or(3.0 - n_b as f64)
    }

    /// `lambda = alpha^2 (n_b + kappa) - n_b`; requires `n_b + lambda > 0`.
    pub fn lambda(&self, n_b: usize) -> Result<f64> {
        if !(self.alpha > 0.0) || !self.beta.is_finite() {
            return Err(ReconError::Config(format!("invalid UT parameters {self:?}")));
        }
        let nb = n_b as f64;
        let lambda = self.alpha * self.alpha * (nb + self.kappa_for(n_b)) - nb;
        if !(nb + lambda > 0.0) {
            return Err(ReconError::Config(format!(
                "n_b + lambda must be positive (n_b = {n_b}, lambda = {lambda})"
            )));
        }
        Ok(lambda)
    }
}

/// `2 n_b + 1` sigma points (rows) with their mean and covariance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub points: DMatrix<f64>,
    pub w_mean: DVector<f64>,
    pub w_cov: DVector<f64>,
}

impl SigmaSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        self.points.tr_mul(&self.w_mean)
    }

    /// `sum_j W_c^j (chi_j - center)(chi_j - center)'`.
    pub fn weighted_cov(&self, center: &DVector<f64>) -> DMatrix<f64> {
        let d = self.points.ncols();
        let mut cov = DMatrix::zeros(d, d);
        for j in 0..self.len() {
            let dev = self.points.row(j).transpose() - center;
            cov.ger(self.w_cov[j], &dev, &dev, 1.0);
        }
        cov
    }
}

/// Symmetric sigma points `b_hat`, `b_hat +/- sqrt(n_b + lambda) L_i` with `L`
/// the lower Cholesky factor of the prior covariance.
pub fn sigma_points(prior: &GaussianDist, params: &UTParams) -> Result<SigmaSet> {
    let n = prior.dim();
    if n == 0 {
        return Err(ReconError::InvalidInput("empty prior".into()));
    }
    let lambda = params.lambda(n)?;
    let spread = (n as f64 + lambda).sqrt();
    let l = cholesky_jittered(prior.cov(), "prior covariance")?.l();
    let mean = prior.mean();
    let mut points = DMatrix::zeros(2 * n + 1, n);
    points.row_mut(0).copy_from(&mean.transpose());
    for i in 0..n {
        let offset = l.column(i) * spread;
        points.row_mut(1 + i).copy_from(&(mean + &offset).transpose());
        points.row_mut(1 + n + i).copy_from(&(mean - &offset).transpose());
    }
    let w0 = lambda / (n as f64 + lambda);
    let wi = 1.0 / (2.0 * (n as f64 + lambda));
    let mut w_mean = DVector::from_element(2 * n + 1, wi);
    let mut w_cov = w_mean.clone();
    w_mean[0] = w0;
    w_cov[0] = w0 + (1.0 - params.alpha * params.alpha + params.beta);
    Ok(SigmaSet { points, w_mean, w_cov })
}

/// Output of the unscented update.
#[derive(Debug, Clone, PartialEq)]
pub struct UKFResult {
    pub prior: GaussianDist,
    pub posterior: GaussianDist,
    /// Transformed mean `u^-`.
    pub u_pred: DVector<f64>,
    /// Innovation covariance.
    pub s_u: DMatrix<f64>,
    /// Cross-covariance between free and constrained blocks.
    pub p_bu: DMatrix<f64>,
    /// Gain, `n_b x n_u`.
    pub gain: DMatrix<f64>,
}

pub fn ukf_reconcile(
    spec: &HierarchySpec,
    prior: &GaussianDist,
    u_hat: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    params: &UTParams,
) -> Result<UKFResult> {
    let (n_b, n_u) = (spec.n_b(), spec.n_u());
    if prior.dim() != n_b {
        return Err(ReconError::DimensionMismatch {
            context: "prior dimension",
            expected: n_b,
            got: prior.dim(),
        });
    }
    if u_hat.len() != n_u || sigma_u.shape() != (n_u, n_u) {
        return Err(ReconError::DimensionMismatch {
            context: "constrained observation",
            expected: n_u,
            got: u_hat.len(),
        });
    }
    let sigma = sigma_points(prior, params)?;
    let mut z = DMatrix::zeros(sigma.len(), n_u);
    for j in 0..sigma.len() {
        let chi: Vec<f64> = sigma.points.row(j).iter().copied().collect();
        let zj = spec.ftc().eval(&chi).map_err(|e| ReconError::Context {
            context: format!("sigma point {j}"),
            source: Box::new(e),
        })?;
        z.row_mut(j).copy_from(&zj.transpose());
    }
    let u_pred = z.tr_mul(&sigma.w_mean);
    let b_hat = prior.mean();
    let mut p_bu = DMatrix::zeros(n_b, n_u);
    let mut s_u = sigma_u.clone();
    for j in 0..sigma.len() {
        let db = sigma.points.row(j).transpose() - b_hat;
        let du = z.row(j).transpose() - &u_pred;
        p_bu.ger(sigma.w_cov[j], &db, &du, 1.0);
        s_u.ger(sigma.w_cov[j], &du, &du, 1.0);
    }
    let s_u = symmetrize(&s_u);
    let chol = cholesky_jittered(&s_u, "innovation covariance")?;
    let gain = chol.solve(&p_bu.transpose()).transpose();
    let mean = b_hat + &gain * (u_hat - &u_pred);
    let cov = symmetrize(&(prior.cov() - &gain * &s_u * gain.transpose()));
    let posterior = GaussianDist::new(mean, cov)?;
    Ok(UKFResult {
        prior: prior.clone(),
        posterior,
        u_pred,
        s_u,
        p_bu,
        gain,
    })
}

/// Rows per generator stream in posterior sampling.
pub const SAMPLE_BLOCK: usize = 256;

/// Draws `m` free vectors from the posterior and maps them onto the manifold.
///
/// Rows `[k * SAMPLE_BLOCK, (k + 1) * SAMPLE_BLOCK)` use stream `k` of a ChaCha
/// generator keyed by `seed`, so the output does not depend on how blocks
/// are scheduled across threads.
pub fn sample_posterior(result: &UKFResult, spec: &HierarchySpec, m: usize, seed: u64) -> Result<SampleCloud> {
    sample_gaussian_coherent(&result.posterior, spec, m, seed)
}

pub fn sample_gaussian_coherent(dist: &GaussianDist, spec: &HierarchySpec, m: usize, seed: u64) -> Result<SampleCloud> {
    if m < 2 {
        return Err(ReconError::TooFewRows { needed: 2, got: m });
    }
    let n_b = spec.n_b();
    let n = spec.n();
    if dist.dim() != n_b {
        return Err(ReconError::DimensionMismatch {
            context: "posterior dimension",
            expected: n_b,
            got: dist.dim(),
        });
    }
    let factor = psd_factor(dist.cov(), "posterior covariance")?;
    let mean = dist.mean();
    let mut buf = vec![0.0; m * n];
    buf.par_chunks_mut(SAMPLE_BLOCK * n)
        .enumerate()
        .try_for_each(|(k, block)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut z = vec![0.0; n_b];
            for (r, y) in block.chunks_exact_mut(n).enumerate() {
                z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let (u, b) = y.split_at_mut(n - n_b);
                for (i, bi) in b.iter_mut().enumerate() {
                    *bi = mean[i] + (0..n_b).map(|j| factor[(i, j)] * z[j]).sum::<f64>();
                }
                spec.ftc().eval_into(b, u).map_err(|e| ReconError::RowFailure {
                    row: k * SAMPLE_BLOCK + r,
                    source: Box::new(e),
                })?;
            }
            Ok::<(), ReconError>(())
        })?;
    SampleCloud::new(DMatrix::from_row_slice(m, n, &buf))
}

/// Gaussian prior for the free block: mean from a base cloud (column means)
/// or passed directly, covariance from the free block of the shrinkage
/// estimate of the residuals.
#[derive(Debug, Clone, Copy)]
pub enum PriorMean<'a> {
    Cloud(&'a SampleCloud),
    Vector(&'a DVector<f64>),
}

pub fn gaussian_prior_from(
    spec: &HierarchySpec,
    mean: PriorMean<'_>,
    residuals: &ResidualMatrix,
) -> Result<GaussianDist> {
    let (n_u, n_b) = (spec.n_u(), spec.n_b());
    let mean = match mean {
        PriorMean::Cloud(cloud) => {
            if cloud.n() != spec.n() {
                return Err(ReconError::DimensionMismatch {
                    context: "base cloud columns",
                    expected: spec.n(),
                    got: cloud.n(),
                });
            }
            cloud.column_means().rows(n_u, n_b).into_owned()
        }
        PriorMean::Vector(v) => v.clone(),
    };
    let cov = free_block_cov(spec, residuals)?;
    GaussianDist::new(mean, cov)
}

fn check_residual_width(spec: &HierarchySpec, residuals: &ResidualMatrix) -> Result<()> {
    if residuals.n() != spec.n() {
        return Err(ReconError::DimensionMismatch {
            context: "residual columns",
            expected: spec.n(),
            got: residuals.n(),
        });
    }
    Ok(())
}

fn free_block_cov(spec: &HierarchySpec, residuals: &ResidualMatrix) -> Result<DMatrix<f64>> {
    check_residual_width(spec, residuals)?;
    let (n_u, n_b) = (spec.n_u(), spec.n_b());
    Ok(shrink_cov(residuals)?.cov.view((n_u, n_u), (n_b, n_b)).into_owned())
}

/// Everything the unscented update needs, derived from a base cloud and the
/// in-sample residuals.
#[derive(Debug, Clone)]
pub struct UkfInputs {
    pub prior: GaussianDist,
    pub u_hat: DVector<f64>,
    pub sigma_u: DMatrix<f64>,
}

impl UkfInputs {
    pub fn from_base(spec: &HierarchySpec, base: &SampleCloud, residuals: &ResidualMatrix) -> Result<Self> {
        check_residual_width(spec, residuals)?;
        if base.n() != spec.n() {
            return Err(ReconError::DimensionMismatch {
                context: "base cloud columns",
                expected: spec.n(),
                got: base.n(),
            });
        }
        let (n_u, n_b) = (spec.n_u(), spec.n_b());
        let shrunk = shrink_cov(residuals)?.cov;
        let means = base.column_means();
        let prior = GaussianDist::new(
            means.rows(n_u, n_b).into_owned(),
            shrunk.view((n_u, n_u), (n_b, n_b)).into_owned(),
        )?;
        Ok(Self {
            prior,
            u_hat: means.rows(0, n_u).into_owned(),
            sigma_u: shrunk.view((0, 0), (n_u, n_u)).into_owned(),
        })
    }
}

/// Base cloud in, coherent posterior cloud of `m` samples out.
pub fn ukf_reconcile_cloud(
    spec: &HierarchySpec,
    base: &SampleCloud,
    residuals: &ResidualMatrix,
    params: &UTParams,
    m: usize,
    seed: u64,
) -> Result<(SampleCloud, UKFResult)> {
    let inputs = UkfInputs::from_base(spec, base, residuals)?;
    let result = ukf_reconcile(spec, &inputs.prior, &inputs.u_hat, &inputs.sigma_u, params)?;
    let cloud = sample_posterior(&result, spec, m, seed)?;
    Ok((cloud, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintFn;
    use crate::hierarchy::coherence_check;
    use rand::Rng;

    fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn scalar_sigma_points_by_hand() {
        let prior = GaussianDist::new(DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1)).unwrap();
        let params = UTParams {
            alpha: 1.0,
            beta: 0.0,
            kappa: Some(2.0),
        };
        assert_eq!(params.lambda(1).unwrap(), 2.0);
        let s = sigma_points(&prior, &params).unwrap();
        let r3 = 3.0_f64.sqrt();
        for (p, e) in s.points.column(0).iter().zip([0.0, r3, -r3]) {
            assert!((p - e).abs() < 1e-15);
        }
        let expected = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (w, e) in s.w_mean.iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
        assert!((s.w_cov[0] - s.w_mean[0]).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one() {
        for n in 1..12 {
            let p = UTParams::default();
            let prior = GaussianDist::new(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
            let s = sigma_points(&prior, &p).unwrap();
            assert!((s.w_mean.sum() - 1.0).abs() < 1e-12, "n = {n}: {}", s.w_mean.sum());
        }
    }

    #[test]
    fn invalid_kappa_rejected() {
        let p = UTParams {
            kappa: Some(-5.0),
            ..Default::default()
        };
        assert!(p.lambda(2).is_err());
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let spec = HierarchySpec::builtin("paraboloid", &[]).unwrap();
        let prior = GaussianDist::new(
            DVector::from_vec(vec![0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]),
        )
        .unwrap();
        let sigma_u = DMatrix::identity(1, 1) * 0.01;
        let first = ukf_reconcile(&spec, &prior, &DVector::zeros(1), &sigma_u, &Default::default()).unwrap();
        let res = ukf_reconcile(&spec, &prior, &first.u_pred, &sigma_u, &Default::default()).unwrap();
        assert!((res.posterior.mean() - prior.mean()).amax() < 1e-15);
    }

    #[test]
    fn uninformative_observation_leaves_prior() {
        let spec = HierarchySpec::builtin("ratio", &[]).unwrap();
        let prior = GaussianDist::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[0.01, 0.002, 0.002, 0.01]),
        )
        .unwrap();
        let sigma_u = DMatrix::identity(1, 1) * 1e12;
        let res = ukf_reconcile(
            &spec,
            &prior,
            &DVector::from_vec(vec![3.0]),
            &sigma_u,
            &Default::default(),
        )
        .unwrap();
        let shift = (res.posterior.mean() - prior.mean()).norm();
        assert!(shift <= 1e-4 * prior.mean().norm());
        assert!((res.posterior.cov() - prior.cov()).amax() < 1e-12);
    }

    #[test]
    fn gain_solves_innovation_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = HierarchySpec::builtin("ratio_block", &[2.0]).unwrap();
        let prior = GaussianDist::new(
            DVector::from_vec(vec![10.0, 20.0, 100.0, 150.0]),
            random_pd(4, &mut rng),
        )
        .unwrap();
        let res = ukf_reconcile(
            &spec,
            &prior,
            &DVector::from_vec(vec![31.0, 249.0, 0.1, 0.13, 0.12]),
            &(DMatrix::identity(5, 5) * 0.01),
            &Default::default(),
        )
        .unwrap();
        let resid = (&res.gain * &res.s_u - &res.p_bu).norm() / res.p_bu.norm();
        assert!(resid < 1e-10);
        assert!(res.posterior.cov().trace() <= prior.cov().trace() + 1e-10);
    }

    #[test]
    fn degenerate_posterior_repeats_mean() {
        let spec = HierarchySpec::builtin("saddle", &[]).unwrap();
        let dist = GaussianDist::new(DVector::from_vec(vec![0.3, 0.2]), DMatrix::zeros(2, 2)).unwrap();
        let cloud = sample_gaussian_coherent(&dist, &spec, 10, 1).unwrap();
        let expected = spec.fta(&[0.3, 0.2]).unwrap();
        for i in 0..10 {
            assert_eq!(cloud.row(i), expected.as_slice());
        }
    }

    #[test]
    fn posterior_sample_mean_within_standard_error() {
        let spec = HierarchySpec::builtin("ripples", &[]).unwrap();
        let dist = GaussianDist::new(
            DVector::from_vec(vec![0.2, -0.4]),
            DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
        )
        .unwrap();
        let m = 50_000;
        let cloud = sample_gaussian_coherent(&dist, &spec, m, 77).unwrap();
        let means = cloud.column_means();
        for k in 0..2 {
            let se = (dist.cov()[(k, k)] / m as f64).sqrt();
            assert!((means[1 + k] - dist.mean()[k]).abs() <= 3.0 * se);
        }
        assert!(coherence_check(&spec, &cloud, 1e-10).unwrap().is_coherent());
    }

    #[test]
    fn sampling_is_thread_count_invariant() {
        let spec = HierarchySpec::builtin("paraboloid", &[]).unwrap();
        let dist = GaussianDist::new(DVector::from_vec(vec![0.1, 0.2]), DMatrix::identity(2, 2) * 0.01).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_gaussian_coherent(&dist, &spec, 500, 5).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn prior_from_cloud_and_vector() {
        let spec = HierarchySpec::builtin("ratio", &[]).unwrap();
        let base = SampleCloud::from_rows(&vec![vec![0.5, 1.0, 2.0]; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = ResidualMatrix::new(DMatrix::from_fn(400, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let prior = gaussian_prior_from(&spec, PriorMean::Cloud(&base), &r).unwrap();
        assert_eq!(prior.mean().as_slice(), &[1.0, 2.0]);
        assert!(prior.cov()[(0, 1)].abs() < 0.05);
        let v = DVector::from_vec(vec![7.0, -1.0]);
        let prior = gaussian_prior_from(&spec, PriorMean::Vector(&v), &r).unwrap();
        assert_eq!(prior.mean(), &v);
    }

    #[test]
    fn sigma_point_domain_error_names_point() {
        let spec = HierarchySpec::new(ConstraintFn::builtin("ratio", &[]).unwrap());
        // denominator mean 0 puts the centre sigma point on the pole
        let prior = GaussianDist::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let err = ukf_reconcile(
            &spec,
            &prior,
            &DVector::from_vec(vec![1.0]),
            &DMatrix::identity(1, 1),
            &Default::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("sigma point 0"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn sigma_set_reproduces_moments(seed in proptest::prelude::any::<u64>(), n in 1usize..=30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mean = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let prior = GaussianDist::new(mean.clone(), random_pd(n, &mut rng)).unwrap();
            let s = sigma_points(&prior, &UTParams::default()).unwrap();
            let m_err = (s.weighted_mean() - &mean).norm() / mean.norm().max(1.0);
            proptest::prop_assert!(m_err <= 1e-12, "mean error {m_err}");
            let c_err = (s.weighted_cov(&mean) - prior.cov()).norm() / prior.cov().norm();
            proptest::prop_assert!(c_err <= 1e-10, "cov error {c_err}");
        }
    }
}
