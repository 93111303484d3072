//! Sample-based proper scoring rules and their relative aggregates.
//!
//! Both estimators keep the self-pairs of the double sum and normalize it by
//! `2 M^2`. Inputs are put in a canonical (sorted) order before summation so
//! that scores do not depend on the order of the samples, bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::hierarchy::SampleCloud;

fn check_obs(cloud: &SampleCloud, y: &[f64]) -> Result<()> {
    if y.len() != cloud.n() {
        return Err(ReconError::DimensionMismatch {
            context: "observation",
            expected: cloud.n(),
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ReconError::InvalidInput("non-finite observation".into()));
    }
    Ok(())
}

fn sorted_rows(cloud: &SampleCloud) -> Vec<Vec<f64>> {
    let mut rows = cloud.rows();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1/M sum_j |x_j - y| - 1/(2 M^2) sum_j sum_k |x_j - x_k|` in Euclidean norm.
pub fn energy_score(cloud: &SampleCloud, y: &[f64]) -> Result<f64> {
    check_obs(cloud, y)?;
    let rows = sorted_rows(cloud);
    let m = rows.len() as f64;
    let to_obs: f64 = rows.iter().map(|r| dist(r, y)).sum();
    // each unordered pair appears twice in the full double sum
    let pair_sums: Vec<f64> = (0..rows.len())
        .into_par_iter()
        .map(|j| rows[j + 1..].iter().map(|r| dist(&rows[j], r)).sum::<f64>())
        .collect();
    let pairs: f64 = pair_sums.iter().sum::<f64>() * 2.0;
    Ok(to_obs / m - pairs / (2.0 * m * m))
}

/// Univariate version of [`energy_score`].
///
/// The pairwise term uses the order-statistics identity
/// `sum_j sum_k |x_j - x_k| = 2 sum_i (2i - M - 1) x_(i)`.
pub fn crps(samples: &[f64], y: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(ReconError::TooFewRows {
            needed: 2,
            got: samples.len(),
        });
    }
    if !y.is_finite() || samples.iter().any(|v| !v.is_finite()) {
        return Err(ReconError::InvalidInput("non-finite CRPS input".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let m = x.len() as f64;
    let to_obs: f64 = x.iter().map(|v| (v - y).abs()).sum();
    let pairs: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i + 1) as f64 - m - 1.0) * v)
        .sum::<f64>()
        * 2.0;
    // the order-statistics sum can round to a hair below zero
    Ok((to_obs / m - pairs / (2.0 * m * m)).max(0.0))
}

/// ES and per-series CRPS of one cloud against one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub es: f64,
    pub crps: Vec<f64>,
}

pub fn score_window(cloud: &SampleCloud, y: &[f64]) -> Result<WindowScore> {
    let es = energy_score(cloud, y)?;
    let crps = (0..cloud.n())
        .map(|j| crps(cloud.column(j), y[j]))
        .collect::<Result<_>>()?;
    Ok(WindowScore { es, crps })
}

/// Scores of one method over all windows, optionally relative to a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub es: f64,
    pub crps_per_series: Vec<f64>,
    pub rel_es: Option<f64>,
    pub rel_crps_gm: Option<f64>,
    pub runtime_seconds: f64,
}

fn sorted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

impl ScoreReport {
    /// Window-averaged ES and CRPS; no baseline attached.
    pub fn from_windows(windows: &[WindowScore], runtime_seconds: f64) -> Result<Self> {
        let n = check_windows(windows)?;
        Ok(Self {
            es: sorted_mean(windows.iter().map(|w| w.es)),
            crps_per_series: (0..n).map(|j| sorted_mean(windows.iter().map(|w| w.crps[j]))).collect(),
            rel_es: None,
            rel_crps_gm: None,
            runtime_seconds,
        })
    }

    pub fn with_baseline(mut self, baseline: &ScoreReport) -> Result<Self> {
        let (rel_es, rel_crps) = relative(&self, baseline)?;
        self.rel_es = Some(rel_es);
        self.rel_crps_gm = Some(rel_crps);
        Ok(self)
    }
}

fn check_windows(windows: &[WindowScore]) -> Result<usize> {
    let first = windows
        .first()
        .ok_or_else(|| ReconError::InvalidInput("no windows to aggregate".into()))?;
    let n = first.crps.len();
    if windows.iter().any(|w| w.crps.len() != n) {
        return Err(ReconError::InvalidInput("windows disagree on series count".into()));
    }
    Ok(n)
}

fn relative(method: &ScoreReport, base: &ScoreReport) -> Result<(f64, f64)> {
    let n = base.crps_per_series.len();
    if method.crps_per_series.len() != n {
        return Err(ReconError::DimensionMismatch {
            context: "series count",
            expected: n,
            got: method.crps_per_series.len(),
        });
    }
    if let Some(j) = base.crps_per_series.iter().position(|&c| !(c > 0.0)) {
        return Err(ReconError::ZeroBaseline(j));
    }
    if !(base.es > 0.0) {
        return Err(ReconError::InvalidInput("baseline energy score is zero".into()));
    }
    let log_mean = method
        .crps_per_series
        .iter()
        .zip(&base.crps_per_series)
        .map(|(m, b)| (m / b).ln())
        .sum::<f64>()
        / n as f64;
    Ok((method.es / base.es, log_mean.exp()))
}

/// `(RelES, RelCRPS)`: per-series CRPS is averaged over windows first, then
/// divided by the baseline's and combined by geometric mean over series.
pub fn aggregate(method: &[WindowScore], baseline: &[WindowScore]) -> Result<(f64, f64)> {
    if method.len() != baseline.len() {
        return Err(ReconError::DimensionMismatch {
            context: "window count",
            expected: baseline.len(),
            got: method.len(),
        });
    }
    let m = ScoreReport::from_windows(method, 0.0)?;
    let b = ScoreReport::from_windows(baseline, 0.0)?;
    relative(&m, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rows: &[Vec<f64>]) -> SampleCloud {
        SampleCloud::from_rows(rows).unwrap()
    }

    fn random_cloud(m: usize, n: usize, seed: u64) -> SampleCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleCloud::new(DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0))).unwrap()
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let y = vec![1.5, -2.0, 0.25];
        let c = cloud(&vec![y.clone(); 7]);
        assert_eq!(energy_score(&c, &y).unwrap(), 0.0);
        assert_eq!(crps(&[3.0; 5], 3.0).unwrap(), 0.0);
    }

    #[test]
    fn two_point_hand_values() {
        // (1/2)(1 + 1) - (1/8)(0 + 2 + 2 + 0)
        let c = cloud(&[vec![0.0], vec![2.0]]);
        assert!((energy_score(&c, &[1.0]).unwrap() - 0.5).abs() <= 1e-15);
        assert!((crps(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn one_dimensional_es_equals_crps() {
        let c = random_cloud(300, 1, 1);
        let es = energy_score(&c, &[0.3]).unwrap();
        let cr = crps(c.column(0), 0.3).unwrap();
        assert!((es - cr).abs() <= 1e-12);
    }

    #[test]
    fn permutation_is_bitwise_invariant() {
        let c = random_cloud(101, 3, 2);
        let mut rows = c.rows();
        rows.reverse();
        rows.swap(3, 50);
        let y = [0.1, 0.2, -0.3];
        assert_eq!(
            energy_score(&c, &y).unwrap().to_bits(),
            energy_score(&cloud(&rows), &y).unwrap().to_bits()
        );
    }

    #[test]
    fn rotation_invariance() {
        let c = random_cloud(200, 3, 3);
        let y = Vector3::new(0.4, -0.1, 1.0);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let rotated: Vec<Vec<f64>> = c
            .rows()
            .iter()
            .map(|r| (rot * Vector3::new(r[0], r[1], r[2])).as_slice().to_vec())
            .collect();
        let ry = rot * y;
        let a = energy_score(&c, y.as_slice()).unwrap();
        let b = energy_score(&cloud(&rotated), ry.as_slice()).unwrap();
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn shifting_away_increases_es() {
        let y = [0.0, 0.0];
        let c = random_cloud(100, 2, 4);
        let before = energy_score(&c, &y).unwrap();
        let shifted: Vec<Vec<f64>> = c.rows().iter().map(|r| vec![r[0] + 5.0, r[1] + 5.0]).collect();
        assert!(energy_score(&cloud(&shifted), &y).unwrap() > before);
    }

    #[test]
    fn dimension_mismatch() {
        let c = random_cloud(5, 3, 5);
        assert!(energy_score(&c, &[0.0, 0.0]).is_err());
        assert!(crps(&[1.0], 0.0).is_err());
    }

    fn windows(scale: f64) -> Vec<WindowScore> {
        (0..4)
            .map(|t| WindowScore {
                es: scale * (1.0 + t as f64),
                crps: vec![scale * (0.5 + t as f64), scale * 2.0],
            })
            .collect()
    }

    #[test]
    fn self_relative_is_exactly_one() {
        let w = windows(1.0);
        assert_eq!(aggregate(&w, &w).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn geometric_mean_symmetry() {
        let base = vec![WindowScore {
            es: 1.0,
            crps: vec![1.0, 1.0],
        }];
        let method = vec![WindowScore {
            es: 1.0,
            crps: vec![0.5, 2.0],
        }];
        let (_, gm) = aggregate(&method, &base).unwrap();
        assert!((gm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn halved_crps_gives_half() {
        // clouds pulled halfway toward a point truth halve every CRPS exactly
        let truth = [1.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut base_w = Vec::new();
        let mut half_w = Vec::new();
        for _ in 0..5 {
            let rows: Vec<Vec<f64>> = (0..64)
                .map(|_| truth.iter().map(|t| t + rng.random_range(-1.0..1.0)).collect())
                .collect();
            let halved: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().zip(&truth).map(|(v, t)| t + 0.5 * (v - t)).collect())
                .collect();
            base_w.push(score_window(&cloud(&rows), &truth).unwrap());
            half_w.push(score_window(&cloud(&halved), &truth).unwrap());
        }
        let (rel_es, gm) = aggregate(&half_w, &base_w).unwrap();
        assert!((gm - 0.5).abs() < 1e-12);
        assert!((rel_es - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_baseline_names_series() {
        let base = vec![WindowScore {
            es: 1.0,
            crps: vec![1.0, 0.0],
        }];
        assert!(matches!(aggregate(&base, &base), Err(ReconError::ZeroBaseline(1))));
    }

    proptest::proptest! {
        #[test]
        fn scores_nonnegative(seed in proptest::prelude::any::<u64>(), m in 2usize..40) {
            let c = random_cloud(m, 2, seed);
            proptest::prop_assert!(energy_score(&c, &[0.0, 0.5]).unwrap() >= 0.0);
            proptest::prop_assert!(crps(c.column(1), 0.5).unwrap() >= 0.0);
        }

        #[test]
        fn aggregate_order_invariant(seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| WindowScore {
                es: rng.random_range(0.1..2.0),
                crps: vec![rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)],
            };
            let a: Vec<WindowScore> = (0..10).map(|_| mk(&mut rng)).collect();
            let b: Vec<WindowScore> = (0..10).map(|_| mk(&mut rng)).collect();
            let mut ar = a.clone();
            let mut br = b.clone();
            ar.reverse();
            br.reverse();
            proptest::prop_assert_eq!(aggregate(&a, &b).unwrap(), aggregate(&ar, &br).unwrap());
        }
    }
}
