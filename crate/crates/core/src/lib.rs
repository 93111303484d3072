//! Coherent probabilistic reconciliation of forecasts under nonlinear
//! constraints `u = f_u(b)`.
//!
//! Sample clouds and vectors use the column order `[u_1..u_nu, b_1..b_nb]`.
//! Reconciliation methods: bottom-up ([`pbu_reconcile`]), per-sample weighted
//! projection ([`project_cloud`]) and unscented conditioning
//! ([`ukf_reconcile`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod constraints;
pub mod covariance;
pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod io;
pub mod linalg;
pub mod projection;
pub mod scoring;
pub mod seed;
pub mod synth;

pub use conditioning::{sample_posterior, sigma_points, ukf_reconcile, SigmaSet, UKFResult, UTParams};
pub use constraints::{ConstraintFn, ConstraintSpec, JacobianMode};
pub use covariance::{shrink_cov, weight_matrix, ResidualMatrix, ShrinkageEstimate, WeightKind};
pub use error::{ReconError, Result};
pub use experiment::Method;
pub use hierarchy::{
    coherence_check, coherence_residual, fta, pbu_reconcile, CoherenceReport, GaussianDist, HierarchySpec, SampleCloud,
};
pub use projection::{project_cloud, project_point, ProjectionConfig, WeightSpec};
pub use scoring::{aggregate, crps, energy_score, score_window, ScoreReport, WindowScore};
pub use seed::derive_seed;
