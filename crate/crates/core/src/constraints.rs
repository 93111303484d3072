//! Free-to-constrained maps `f_u : R^{n_b} -> R^{n_u}` with value and Jacobian
//! evaluation.
//!
//! The registry is closed: every builtin carries an analytic Jacobian. User
//! supplied black-box maps go through [`ConstraintFn::custom`] and are
//! differentiated by central finite differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};

/// Denominators at or below this magnitude abort evaluation.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;
/// Denominators below this magnitude are rejected when differentiating.
pub const JACOBIAN_DENOMINATOR_FLOOR: f64 = 1e-10;
/// Relative central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

/// Names accepted by [`ConstraintFn::builtin`].
pub const BUILTIN_NAMES: &[&str] = &[
    "paraboloid",
    "saddle",
    "ripples",
    "ratio",
    "ratio_block",
    "sum",
    "product",
    "linear",
];

/// Black-box map signature for [`ConstraintFn::custom`].
pub type CustomMap = dyn Fn(&[f64], &mut [f64]) -> std::result::Result<(), String> + Send + Sync;

#[derive(Clone)]
enum Kind {
    Paraboloid,
    Saddle,
    Ripples,
    Ratio { num: usize, den: usize },
    RatioBlock { k: usize },
    Sum,
    Product { i: usize, j: usize },
    Linear { a: DMatrix<f64> },
    Custom(Arc<CustomMap>),
}

impl fmt::Debug for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Paraboloid => write!(f, "Paraboloid"),
            Kind::Saddle => write!(f, "Saddle"),
            Kind::Ripples => write!(f, "Ripples"),
            Kind::Ratio { num, den } => write!(f, "Ratio({num}/{den})"),
            Kind::RatioBlock { k } => write!(f, "RatioBlock({k})"),
            Kind::Sum => write!(f, "Sum"),
            Kind::Product { i, j } => write!(f, "Product({i}*{j})"),
            Kind::Linear { a } => write!(f, "Linear({}x{})", a.nrows(), a.ncols()),
            Kind::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Serialized form used in experiment configs: `{"name": "...", "params": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl ConstraintSpec {
    pub fn new(name: impl Into<String>, params: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            params,
        }
    }

    pub fn build(&self) -> Result<ConstraintFn> {
        ConstraintFn::builtin(&self.name, &self.params)
    }
}

/// A free-to-constrained map together with its Jacobian.
///
/// Stateless after construction; cheap to clone and safe to share across threads.
#[derive(Debug, Clone)]
pub struct ConstraintFn {
    name: String,
    arity_in: usize,
    arity_out: usize,
    params: Vec<f64>,
    jacobian_mode: JacobianMode,
    kind: Kind,
}

fn param_index(name: &str, v: f64) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(ReconError::InvalidParams {
            name: name.to_string(),
            reason: format!("expected a non-negative integer, got {v}"),
        })
    }
}

fn invalid(name: &str, reason: impl Into<String>) -> ReconError {
    ReconError::InvalidParams {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Parses `[]`, `[i, j]` or `[n_b, i, j]` into `(n_b, i, j)`.
fn pair_params(name: &str, params: &[f64]) -> Result<(usize, usize, usize)> {
    let (n_b, i, j) = match params {
        [] => (2, 0, 1),
        [i, j] => {
            let (i, j) = (param_index(name, *i)?, param_index(name, *j)?);
            (i.max(j) + 1, i, j)
        }
        [n, i, j] => (param_index(name, *n)?, param_index(name, *i)?, param_index(name, *j)?),
        _ => return Err(invalid(name, "expected [], [i, j] or [n_b, i, j]")),
    };
    if i >= n_b || j >= n_b {
        return Err(invalid(
            name,
            format!("indices ({i}, {j}) out of range for n_b = {n_b}"),
        ));
    }
    if i == j {
        return Err(invalid(name, "indices must differ"));
    }
    Ok((n_b, i, j))
}

impl ConstraintFn {
    /// Looks up a registered map by name.
    ///
    /// | name          | params                       | map |
    /// |---------------|------------------------------|-----|
    /// | `paraboloid`  | none                         | `b1^2 + b2^2` |
    /// | `saddle`      | none                         | `b1^2 - b2^2` |
    /// | `ripples`     | none                         | `sin b1 + cos b2` |
    /// | `ratio`       | `[]`, `[i, j]`, `[n_b, i, j]` | `b_i / b_j` |
    /// | `ratio_block` | `[k]`                        | totals and rates of `k` count pairs |
    /// | `sum`         | `[n_b]`                      | `sum_k b_k` |
    /// | `product`     | `[]`, `[i, j]`, `[n_b, i, j]` | `b_i * b_j` |
    /// | `linear`      | `[n_u, n_b, a_11, ...]`      | `A b`, `A` row-major |
    ///
    /// `ratio_block` takes free series `[num_1..num_k, den_1..den_k]` and
    /// produces `[sum num, sum den, num_1/den_1, .., num_k/den_k, sum num / sum den]`.
    pub fn builtin(name: &str, params: &[f64]) -> Result<Self> {
        let no_params = |p: &[f64]| {
            if p.is_empty() {
                Ok(())
            } else {
                Err(invalid(name, "takes no parameters"))
            }
        };
        let (kind, arity_in, arity_out) = match name {
            "paraboloid" => {
                no_params(params)?;
                (Kind::Paraboloid, 2, 1)
            }
            "saddle" => {
                no_params(params)?;
                (Kind::Saddle, 2, 1)
            }
            "ripples" => {
                no_params(params)?;
                (Kind::Ripples, 2, 1)
            }
            "ratio" => {
                let (n_b, num, den) = pair_params(name, params)?;
                (Kind::Ratio { num, den }, n_b, 1)
            }
            "product" => {
                let (n_b, i, j) = pair_params(name, params)?;
                (Kind::Product { i, j }, n_b, 1)
            }
            "sum" => {
                let n_b = match params {
                    [] => 2,
                    [n] => param_index(name, *n)?,
                    _ => return Err(invalid(name, "expected [n_b]")),
                };
                if n_b == 0 {
                    return Err(invalid(name, "n_b must be at least 1"));
                }
                (Kind::Sum, n_b, 1)
            }
            "ratio_block" => {
                let k = match params {
                    [] => 2,
                    [k] => param_index(name, *k)?,
                    _ => return Err(invalid(name, "expected [k]")),
                };
                if k == 0 {
                    return Err(invalid(name, "k must be at least 1"));
                }
                (Kind::RatioBlock { k }, 2 * k, k + 3)
            }
            "linear" => {
                if params.len() < 2 {
                    return Err(invalid(name, "expected [n_u, n_b, entries...]"));
                }
                let n_u = param_index(name, params[0])?;
                let n_b = param_index(name, params[1])?;
                if n_u == 0 || n_b == 0 {
                    return Err(invalid(name, "n_u and n_b must be positive"));
                }
                let entries = &params[2..];
                if entries.len() != n_u * n_b {
                    return Err(invalid(
                        name,
                        format!("expected {} entries, got {}", n_u * n_b, entries.len()),
                    ));
                }
                if entries.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(name, "entries must be finite"));
                }
                let a = DMatrix::from_row_slice(n_u, n_b, entries);
                (Kind::Linear { a }, n_b, n_u)
            }
            other => return Err(ReconError::UnknownConstraint(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            arity_in,
            arity_out,
            params: params.to_vec(),
            jacobian_mode: JacobianMode::Analytic,
            kind,
        })
    }

    /// `f_u(b) = A b`.
    pub fn linear(a: &DMatrix<f64>) -> Result<Self> {
        let mut params = vec![a.nrows() as f64, a.ncols() as f64];
        for i in 0..a.nrows() {
            params.extend(a.row(i).iter());
        }
        Self::builtin("linear", &params)
    }

    /// Wraps a black-box map; its Jacobian is taken by central differences.
    pub fn custom<F>(name: impl Into<String>, arity_in: usize, arity_out: usize, map: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) -> std::result::Result<(), String> + Send + Sync + 'static,
    {
        let name = name.into();
        if arity_in == 0 || arity_out == 0 {
            return Err(invalid(&name, "arities must be positive"));
        }
        Ok(Self {
            name,
            arity_in,
            arity_out,
            params: Vec::new(),
            jacobian_mode: JacobianMode::FiniteDifference,
            kind: Kind::Custom(Arc::new(map)),
        })
    }

    /// Same map, differentiated numerically.
    pub fn with_finite_differences(mut self) -> Self {
        self.jacobian_mode = JacobianMode::FiniteDifference;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity_in(&self) -> usize {
        self.arity_in
    }

    pub fn arity_out(&self) -> usize {
        self.arity_out
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn jacobian_mode(&self) -> JacobianMode {
        self.jacobian_mode
    }

    pub fn spec(&self) -> ConstraintSpec {
        ConstraintSpec::new(self.name.clone(), self.params.clone())
    }

    fn domain_error(&self, b: &[f64], reason: impl Into<String>) -> ReconError {
        ReconError::Domain {
            name: self.name.clone(),
            input: b.to_vec(),
            reason: reason.into(),
        }
    }

    fn check_input(&self, b: &[f64]) -> Result<()> {
        if b.len() != self.arity_in {
            return Err(ReconError::DimensionMismatch {
                context: "constraint input",
                expected: self.arity_in,
                got: b.len(),
            });
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(self.domain_error(b, "non-finite input"));
        }
        Ok(())
    }

    /// Evaluates `f_u(b)` into `out` (length `n_u`).
    pub fn eval_into(&self, b: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_input(b)?;
        if out.len() != self.arity_out {
            return Err(ReconError::DimensionMismatch {
                context: "constraint output",
                expected: self.arity_out,
                got: out.len(),
            });
        }
        match &self.kind {
            Kind::Paraboloid => out[0] = b[0] * b[0] + b[1] * b[1],
            Kind::Saddle => out[0] = b[0] * b[0] - b[1] * b[1],
            Kind::Ripples => out[0] = b[0].sin() + b[1].cos(),
            Kind::Ratio { num, den } => {
                if b[*den].abs() <= DENOMINATOR_FLOOR {
                    return Err(self.domain_error(b, format!("zero denominator b[{den}]")));
                }
                out[0] = b[*num] / b[*den];
            }
            Kind::Product { i, j } => out[0] = b[*i] * b[*j],
            Kind::Sum => out[0] = b.iter().sum(),
            Kind::RatioBlock { k } => {
                let (nums, dens) = b.split_at(*k);
                let total_num: f64 = nums.iter().sum();
                let total_den: f64 = dens.iter().sum();
                out[0] = total_num;
                out[1] = total_den;
                for (idx, (n, d)) in nums.iter().zip(dens).enumerate() {
                    if d.abs() <= DENOMINATOR_FLOOR {
                        return Err(self.domain_error(b, format!("zero denominator b[{}]", k + idx)));
                    }
                    out[2 + idx] = n / d;
                }
                if total_den.abs() <= DENOMINATOR_FLOOR {
                    return Err(self.domain_error(b, "zero total denominator"));
                }
                out[k + 2] = total_num / total_den;
            }
            Kind::Linear { a } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = a.row(i).iter().zip(b).map(|(x, y)| x * y).sum();
                }
            }
            Kind::Custom(map) => map(b, out).map_err(|reason| self.domain_error(b, reason))?,
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(self.domain_error(b, "non-finite output"));
        }
        Ok(())
    }

    pub fn eval(&self, b: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.arity_out);
        self.eval_into(b, out.as_mut_slice())?;
        Ok(out)
    }

    /// Jacobian of `f_u` at `b`, `n_u x n_b`.
    pub fn eval_jacobian(&self, b: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(b)?;
        match self.jacobian_mode {
            JacobianMode::Analytic => self.analytic_jacobian(b),
            JacobianMode::FiniteDifference => self.fd_jacobian(b),
        }
    }

    /// Central differences with step `1e-6 * max(1, |b_k|)` per coordinate.
    pub fn fd_jacobian(&self, b: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(b)?;
        let mut jac = DMatrix::zeros(self.arity_out, self.arity_in);
        let mut x = b.to_vec();
        let mut plus = vec![0.0; self.arity_out];
        let mut minus = vec![0.0; self.arity_out];
        for k in 0..self.arity_in {
            let h = FD_STEP * b[k].abs().max(1.0);
            x[k] = b[k] + h;
            self.eval_into(&x, &mut plus)?;
            x[k] = b[k] - h;
            self.eval_into(&x, &mut minus)?;
            x[k] = b[k];
            let width = 2.0 * h;
            for i in 0..self.arity_out {
                jac[(i, k)] = (plus[i] - minus[i]) / width;
            }
        }
        Ok(jac)
    }

    fn analytic_jacobian(&self, b: &[f64]) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.arity_out, self.arity_in);
        match &self.kind {
            Kind::Paraboloid => {
                jac[(0, 0)] = 2.0 * b[0];
                jac[(0, 1)] = 2.0 * b[1];
            }
            Kind::Saddle => {
                jac[(0, 0)] = 2.0 * b[0];
                jac[(0, 1)] = -2.0 * b[1];
            }
            Kind::Ripples => {
                jac[(0, 0)] = b[0].cos();
                jac[(0, 1)] = -b[1].sin();
            }
            Kind::Ratio { num, den } => {
                let d = b[*den];
                if d.abs() < JACOBIAN_DENOMINATOR_FLOOR {
                    return Err(self.domain_error(b, format!("ill-conditioned denominator b[{den}]")));
                }
                jac[(0, *num)] = 1.0 / d;
                jac[(0, *den)] = -b[*num] / (d * d);
            }
            Kind::Product { i, j } => {
                jac[(0, *i)] = b[*j];
                jac[(0, *j)] = b[*i];
            }
            Kind::Sum => jac.fill(1.0),
            Kind::RatioBlock { k } => {
                let k = *k;
                let (nums, dens) = b.split_at(k);
                let total_num: f64 = nums.iter().sum();
                let total_den: f64 = dens.iter().sum();
                if total_den.abs() < JACOBIAN_DENOMINATOR_FLOOR {
                    return Err(self.domain_error(b, "ill-conditioned total denominator"));
                }
                for idx in 0..k {
                    let (n, d) = (nums[idx], dens[idx]);
                    if d.abs() < JACOBIAN_DENOMINATOR_FLOOR {
                        return Err(self.domain_error(b, format!("ill-conditioned denominator b[{}]", k + idx)));
                    }
                    jac[(0, idx)] = 1.0;
                    jac[(1, k + idx)] = 1.0;
                    jac[(2 + idx, idx)] = 1.0 / d;
                    jac[(2 + idx, k + idx)] = -n / (d * d);
                    jac[(k + 2, idx)] = 1.0 / total_den;
                    jac[(k + 2, k + idx)] = -total_num / (total_den * total_den);
                }
            }
            Kind::Linear { a } => jac.copy_from(a),
            Kind::Custom(_) => return self.fd_jacobian(b),
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn builtin(name: &str) -> ConstraintFn {
        ConstraintFn::builtin(name, &[]).unwrap()
    }

    #[test]
    fn ripples_at_origin() {
        assert_eq!(builtin("ripples").eval(&[0.0, 0.0]).unwrap()[0], 1.0);
    }

    #[test]
    fn paraboloid_jacobian() {
        let j = builtin("paraboloid").eval_jacobian(&[1.0, -1.0]).unwrap();
        assert_eq!(j.as_slice(), &[2.0, -2.0]);
    }

    #[test]
    fn ratio_value_and_jacobian() {
        let f = builtin("ratio");
        assert_eq!(f.eval(&[6.0, 3.0]).unwrap()[0], 2.0);
        let j = f.eval_jacobian(&[6.0, 3.0]).unwrap();
        assert!((j[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((j[(0, 1)] + 6.0 / 9.0).abs() < 1e-15);
        let fd = f.fd_jacobian(&[6.0, 3.0]).unwrap();
        assert!((fd - j).amax() < 1e-8);
    }

    #[test]
    fn sum_jacobian_is_row_of_ones() {
        let f = ConstraintFn::builtin("sum", &[3.0]).unwrap();
        for b in [[0.0, 0.0, 0.0], [1.5, -7.0, 2.0]] {
            let j = f.eval_jacobian(&b).unwrap();
            assert_eq!(j.shape(), (1, 3));
            assert!(j.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn saddle_jacobian() {
        let j = builtin("saddle").eval_jacobian(&[2.0, 3.0]).unwrap();
        assert_eq!(j.as_slice(), &[4.0, -6.0]);
    }

    #[test]
    fn ripples_jacobian_matches_fd() {
        let f = builtin("ripples");
        let b = [FRAC_PI_2, 0.0];
        let j = f.eval_jacobian(&b).unwrap();
        assert!(j[(0, 0)].abs() < 1e-15);
        assert_eq!(j[(0, 1)], 0.0);
        let fd = f.fd_jacobian(&b).unwrap();
        assert!((fd - j).amax() < 1e-6);
    }

    #[test]
    fn zero_denominator_is_domain_error() {
        let f = builtin("ratio");
        assert!(matches!(f.eval(&[1.0, 0.0]), Err(ReconError::Domain { .. })));
        assert!(matches!(f.eval_jacobian(&[1.0, 1e-12]), Err(ReconError::Domain { .. })));
    }

    #[test]
    fn unknown_and_bad_params() {
        assert!(matches!(
            ConstraintFn::builtin("cube", &[]),
            Err(ReconError::UnknownConstraint(_))
        ));
        assert!(ConstraintFn::builtin("paraboloid", &[1.0]).is_err());
        assert!(ConstraintFn::builtin("ratio", &[0.0, 0.0]).is_err());
        assert!(ConstraintFn::builtin("ratio", &[2.0, 0.0, 5.0]).is_err());
        assert!(ConstraintFn::builtin("sum", &[1.5]).is_err());
        assert!(ConstraintFn::builtin("linear", &[1.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn ratio_block_rates_times_denominators() {
        let f = ConstraintFn::builtin("ratio_block", &[3.0]).unwrap();
        assert_eq!((f.arity_in(), f.arity_out()), (6, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1000.0)).collect();
            let u = f.eval(&b).unwrap();
            for k in 0..3 {
                let rel = (u[2 + k] * b[3 + k] - b[k]).abs() / b[k].abs();
                assert!(rel <= 1e-12);
            }
            let rel = (u[5] * u[1] - u[0]).abs() / u[0].abs();
            assert!(rel <= 1e-12);
        }
    }

    #[test]
    fn custom_map_uses_finite_differences() {
        let f = ConstraintFn::custom("cube", 1, 1, |b, out| {
            out[0] = b[0].powi(3);
            Ok(())
        })
        .unwrap();
        assert_eq!(f.jacobian_mode(), JacobianMode::FiniteDifference);
        let j = f.eval_jacobian(&[2.0]).unwrap();
        assert!((j[(0, 0)] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn custom_map_error_reports_input() {
        let f = ConstraintFn::custom("log", 1, 1, |b, out| {
            if b[0] <= 0.0 {
                return Err("log of non-positive".into());
            }
            out[0] = b[0].ln();
            Ok(())
        })
        .unwrap();
        match f.eval(&[-1.0]) {
            Err(ReconError::Domain { input, .. }) => assert_eq!(input, vec![-1.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn all_builtins() -> Vec<ConstraintFn> {
        vec![
            builtin("paraboloid"),
            builtin("saddle"),
            builtin("ripples"),
            ConstraintFn::builtin("ratio", &[3.0, 2.0, 0.0]).unwrap(),
            ConstraintFn::builtin("ratio_block", &[2.0]).unwrap(),
            ConstraintFn::builtin("sum", &[4.0]).unwrap(),
            ConstraintFn::builtin("product", &[0.0, 2.0]).unwrap(),
            ConstraintFn::builtin("linear", &[2.0, 2.0, 1.0, -2.0, 0.5, 3.0]).unwrap(),
        ]
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn analytic_jacobians_match_central_differences(seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for f in all_builtins() {
                let b: Vec<f64> = (0..f.arity_in())
                    .map(|_| {
                        // keep denominators away from zero for the ratio maps
                        let v: f64 = rng.random_range(-2.0..2.0);
                        if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v }
                    })
                    .collect();
                let Ok(j) = f.eval_jacobian(&b) else { continue };
                let fd = f.fd_jacobian(&b).unwrap();
                for (a, n) in j.iter().zip(fd.iter()) {
                    let scale = a.abs().max(n.abs()).max(1.0);
                    proptest::prop_assert!((a - n).abs() <= 1e-4 * scale, "{}: {a} vs {n}", f.name());
                }
            }
        }
    }
}
