//! Synthetic benchmark: AR(1) free series mapped through a surface, a
//! chronological train/test split, lag-1 least-squares base forecasts and a
//! joint residual bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::ResidualMatrix;
use crate::error::{ReconError, Result};
use crate::hierarchy::{HierarchySpec, SampleCloud};
use crate::seed::derive_seed;

pub const DEFAULT_BURN_IN: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ar1Config {
    pub phi: Vec<f64>,
    pub noise_sd: Vec<f64>,
    pub t: usize,
    pub seed: u64,
    pub burn_in: usize,
}

impl Default for Ar1Config {
    fn default() -> Self {
        Self {
            phi: vec![0.9, 0.9],
            noise_sd: vec![0.1, 0.1],
            t: 1000,
            seed: 0,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

impl Ar1Config {
    pub fn validate(&self, n_b: usize) -> Result<()> {
        if self.phi.len() != n_b || self.noise_sd.len() != n_b {
            return Err(ReconError::Config(format!(
                "AR(1) config has {} coefficients and {} noise scales for {n_b} free series",
                self.phi.len(),
                self.noise_sd.len()
            )));
        }
        if self.phi.iter().any(|p| !(p.abs() < 1.0)) {
            return Err(ReconError::Config("AR coefficients must satisfy |phi| < 1".into()));
        }
        if self.noise_sd.iter().any(|s| !(*s > 0.0)) {
            return Err(ReconError::Config("noise scales must be positive".into()));
        }
        if self.t < 10 {
            return Err(ReconError::Config(format!("series length {} below 10", self.t)));
        }
        Ok(())
    }
}

/// Simulates `T` rows `[f_u(B_t), B_t]` with autonomous AR(1) free series
/// started at zero; the first `burn_in` steps are discarded.
pub fn generate(cfg: &Ar1Config, spec: &HierarchySpec) -> Result<DMatrix<f64>> {
    let n_b = spec.n_b();
    cfg.validate(n_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = vec![0.0; n_b];
    let mut data = DMatrix::zeros(cfg.t, spec.n());
    let mut y = vec![0.0; spec.n()];
    for step in 0..cfg.burn_in + cfg.t {
        for ((bk, phi), sd) in b.iter_mut().zip(&cfg.phi).zip(&cfg.noise_sd) {
            let e: f64 = rng.sample(StandardNormal);
            *bk = phi * *bk + sd * e;
        }
        if step >= cfg.burn_in {
            spec.fta_into(&b, &mut y).map_err(|e| ReconError::RowFailure {
                row: step - cfg.burn_in,
                source: Box::new(e),
            })?;
            data.row_mut(step - cfg.burn_in).copy_from_slice(&y);
        }
    }
    Ok(data)
}

/// `y_t ~ intercept + slope * y_{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagOneModel {
    pub intercept: f64,
    pub slope: f64,
}

impl LagOneModel {
    /// Ordinary least squares on consecutive pairs. A constant regressor
    /// gives slope zero.
    pub fn fit(series: &[f64]) -> Result<Self> {
        if series.len() < 3 {
            return Err(ReconError::TooFewRows {
                needed: 3,
                got: series.len(),
            });
        }
        let x = &series[..series.len() - 1];
        let y = &series[1..];
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        Ok(Self {
            intercept: my - slope * mx,
            slope,
        })
    }

    pub fn predict(&self, prev: f64) -> f64 {
        self.intercept + self.slope * prev
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFit {
    pub models: Vec<LagOneModel>,
    pub residuals: ResidualMatrix,
}

impl ForecastFit {
    /// Fits one lag-1 model per column of the training block and collects the
    /// in-sample residual vectors.
    pub fn fit(train: &DMatrix<f64>) -> Result<Self> {
        let n = train.ncols();
        let t = train.nrows();
        if t < 3 {
            return Err(ReconError::TooFewRows { needed: 3, got: t });
        }
        let models: Vec<LagOneModel> = (0..n)
            .map(|j| LagOneModel::fit(train.column(j).as_slice()))
            .collect::<Result<_>>()?;
        let residuals = DMatrix::from_fn(t - 1, n, |i, j| train[(i + 1, j)] - models[j].predict(train[(i, j)]));
        Ok(Self {
            models,
            residuals: ResidualMatrix::new(residuals)?,
        })
    }

    pub fn predict(&self, prev: &[f64]) -> DVector<f64> {
        DVector::from_iterator(prev.len(), self.models.iter().zip(prev).map(|(m, p)| m.predict(*p)))
    }
}

/// Point forecast plus, for each requested row index, that whole residual row.
pub fn bootstrap_cloud(point: &DVector<f64>, residuals: &ResidualMatrix, indices: &[usize]) -> Result<SampleCloud> {
    let r = residuals.matrix();
    if point.len() != r.ncols() {
        return Err(ReconError::DimensionMismatch {
            context: "bootstrap point",
            expected: r.ncols(),
            got: point.len(),
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= r.nrows()) {
        return Err(ReconError::InvalidInput(format!("residual row {bad} out of range")));
    }
    SampleCloud::new(DMatrix::from_fn(indices.len(), point.len(), |s, j| {
        point[j] + r[(indices[s], j)]
    }))
}

/// One test step: the base forecast cloud and the realized value.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastWindow {
    /// Row of the dataset being forecast.
    pub index: usize,
    pub point: DVector<f64>,
    pub truth: Vec<f64>,
    pub base: SampleCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseForecasts {
    pub fit: ForecastFit,
    pub windows: Vec<ForecastWindow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub samples: usize,
    pub seed: u64,
    /// Score only the first `k` test steps.
    pub n_test_steps: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            samples: 1000,
            seed: 0,
            n_test_steps: None,
        }
    }
}

/// Chronological split, lag-1 fits on the training block and a joint
/// residual bootstrap for every one-step-ahead test forecast.
///
/// Each bootstrap sample draws one residual row index, shared by all series.
pub fn fit_and_forecast(data: &DMatrix<f64>, cfg: &SplitConfig) -> Result<BaseForecasts> {
    if cfg.samples < 2 {
        return Err(ReconError::TooFewRows {
            needed: 2,
            got: cfg.samples,
        });
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(ReconError::Config(format!(
            "train fraction {} outside (0, 1)",
            cfg.train_fraction
        )));
    }
    let t = data.nrows();
    let n_train = (cfg.train_fraction * t as f64).floor() as usize;
    if n_train < 3 {
        return Err(ReconError::TooFewRows {
            needed: 3,
            got: n_train,
        });
    }
    if n_train >= t {
        return Err(ReconError::Config("empty test block".into()));
    }
    let fit = ForecastFit::fit(&data.rows(0, n_train).into_owned())?;
    let n_rows = fit.residuals.t_in();
    let last = cfg.n_test_steps.map_or(t, |k| (n_train + k).min(t));
    let windows = (n_train..last)
        .map(|idx| {
            let prev: Vec<f64> = data.row(idx - 1).iter().copied().collect();
            let point = fit.predict(&prev);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["bootstrap".into(), idx.into()]));
            let indices: Vec<usize> = (0..cfg.samples).map(|_| rng.random_range(0..n_rows)).collect();
            let base = bootstrap_cloud(&point, &fit.residuals, &indices)?;
            Ok(ForecastWindow {
                index: idx,
                point,
                truth: data.row(idx).iter().copied().collect(),
                base,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BaseForecasts { fit, windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::coherence_check;

    fn paraboloid() -> HierarchySpec {
        HierarchySpec::builtin("paraboloid", &[]).unwrap()
    }

    #[test]
    fn vanishing_noise_stays_at_zero() {
        let cfg = Ar1Config {
            noise_sd: vec![1e-300, 1e-300],
            t: 50,
            ..Default::default()
        };
        let data = generate(&cfg, &HierarchySpec::builtin("ripples", &[]).unwrap()).unwrap();
        for i in 0..50 {
            assert!(data[(i, 1)].abs() < 1e-290 && data[(i, 2)].abs() < 1e-290);
            assert_eq!(data[(i, 0)], 1.0);
        }
    }

    #[test]
    fn lag_one_autocorrelation_near_phi() {
        let cfg = Ar1Config {
            seed: 42,
            ..Default::default()
        };
        let data = generate(&cfg, &paraboloid()).unwrap();
        let b1: Vec<f64> = data.column(1).iter().copied().collect();
        let mean = b1.iter().sum::<f64>() / b1.len() as f64;
        let c0: f64 = b1.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = b1.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = c1 / c0;
        assert!((0.85..=0.94).contains(&rho), "rho = {rho}");
    }

    #[test]
    fn generated_data_is_coherent() {
        for name in ["paraboloid", "saddle", "ripples"] {
            let spec = HierarchySpec::builtin(name, &[]).unwrap();
            let data = generate(&Ar1Config::default(), &spec).unwrap();
            let report = coherence_check(&spec, &SampleCloud::new(data).unwrap(), 1e-12).unwrap();
            assert!(report.is_coherent());
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = paraboloid();
        let cfg = Ar1Config {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate(&cfg, &spec).unwrap(), generate(&cfg, &spec).unwrap());
    }

    #[test]
    fn config_validation() {
        let spec = paraboloid();
        let bad_phi = Ar1Config {
            phi: vec![1.0, 0.5],
            ..Default::default()
        };
        assert!(generate(&bad_phi, &spec).is_err());
        let short = Ar1Config {
            t: 5,
            ..Default::default()
        };
        assert!(generate(&short, &spec).is_err());
    }

    #[test]
    fn exact_dynamics_collapse_the_cloud() {
        // y_t = 0.5 y_{t-1} + 1 with no noise
        let mut y = vec![4.0];
        for _ in 0..40 {
            let last = *y.last().unwrap();
            y.push(0.5 * last + 1.0);
        }
        let data = DMatrix::from_fn(y.len(), 2, |i, j| if j == 0 { y[i] } else { 2.0 * y[i] });
        let out = fit_and_forecast(
            &data,
            &SplitConfig {
                samples: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.fit.residuals.matrix().amax() < 1e-12);
        for w in &out.windows {
            for i in 0..20 {
                for j in 0..2 {
                    assert!((w.base.samples()[(i, j)] - w.point[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_draw_reproduces_residual_rows() {
        let data = generate(&Ar1Config::default(), &paraboloid()).unwrap();
        let fit = ForecastFit::fit(&data.rows(0, 800).into_owned()).unwrap();
        let m = fit.residuals.t_in();
        let point = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let indices: Vec<usize> = (0..m).collect();
        let cloud = bootstrap_cloud(&point, &fit.residuals, &indices).unwrap();
        for i in 0..m {
            for j in 0..3 {
                assert_eq!(cloud.samples()[(i, j)], point[j] + fit.residuals.matrix()[(i, j)]);
            }
        }
    }

    #[test]
    fn joint_resampling_keeps_cross_correlation() {
        let data = generate(
            &Ar1Config {
                seed: 3,
                ..Default::default()
            },
            &paraboloid(),
        )
        .unwrap();
        let out = fit_and_forecast(
            &data,
            &SplitConfig {
                samples: 10_000,
                seed: 4,
                n_test_steps: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let r = out.fit.residuals.matrix();
        let in_sample = corr(r.column(0).as_slice(), r.column(1).as_slice());
        let cloud = &out.windows[0].base;
        let boot = corr(cloud.column(0), cloud.column(1));
        assert!((in_sample - boot).abs() < 0.05, "{in_sample} vs {boot}");
    }

    #[test]
    fn split_layout() {
        let data = generate(&Ar1Config::default(), &paraboloid()).unwrap();
        let out = fit_and_forecast(
            &data,
            &SplitConfig {
                samples: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.windows.len(), 200);
        assert_eq!(out.windows[0].index, 800);
        assert_eq!(out.fit.residuals.t_in(), 799);
        assert_eq!(out.windows[0].truth, data.row(800).iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn short_training_block_rejected() {
        let data = DMatrix::from_element(3, 2, 1.0);
        assert!(fit_and_forecast(&data, &SplitConfig::default()).is_err());
    }
}
