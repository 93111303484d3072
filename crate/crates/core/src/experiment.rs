//! Experiment orchestration: reconcile base clouds with every configured
//! method, verify coherence, score, and aggregate into relative tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{sample_posterior, ukf_reconcile, UTParams};
use crate::constraints::ConstraintSpec;
use crate::covariance::{shrink_cov, weight_matrix, ResidualMatrix, WeightKind};
use crate::error::{ReconError, Result};
use crate::hierarchy::{coherence_check, pbu_reconcile, GaussianDist, HierarchySpec, SampleCloud};
use crate::io;
use crate::projection::{project_cloud, ProjectionConfig, ProjectionDiagnostics, WeightSpec};
use crate::scoring::{score_window, ScoreReport, WindowScore};
use crate::seed::derive_seed;
use crate::synth::{fit_and_forecast, generate, Ar1Config, SplitConfig};

/// Coherence tolerance for projected clouds.
pub const PROJ_COHERENCE_TOL: f64 = 1e-8;
/// Coherence tolerance for bottom-up and UKF clouds.
pub const EXACT_COHERENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "pbu")]
    Pbu,
    #[serde(rename = "proj-ols")]
    ProjOls,
    #[serde(rename = "proj-wls")]
    ProjWls,
    #[serde(rename = "proj-full")]
    ProjFull,
    #[serde(rename = "ukf")]
    Ukf,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Base,
        Method::Pbu,
        Method::ProjOls,
        Method::ProjWls,
        Method::ProjFull,
        Method::Ukf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Pbu => "pbu",
            Method::ProjOls => "proj-ols",
            Method::ProjWls => "proj-wls",
            Method::ProjFull => "proj-full",
            Method::Ukf => "ukf",
        }
    }

    pub fn weight_kind(&self) -> Option<WeightKind> {
        match self {
            Method::ProjOls => Some(WeightKind::Ols),
            Method::ProjWls => Some(WeightKind::Wls),
            Method::ProjFull => Some(WeightKind::Full),
            _ => None,
        }
    }

    pub fn needs_residuals(&self) -> bool {
        matches!(self, Method::ProjWls | Method::ProjFull | Method::Ukf)
    }

    pub fn coherence_tol(&self) -> Option<f64> {
        match self {
            Method::Base => None,
            Method::Pbu | Method::Ukf => Some(EXACT_COHERENCE_TOL),
            _ => Some(PROJ_COHERENCE_TOL),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ReconError::Config(format!("unknown method `{s}`")))
    }
}

/// Reconciliation settings shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ReconcileSettings {
    pub ut: UTParams,
    pub projection: ProjectionConfig,
}

/// A method with everything derived from the residuals precomputed, so that
/// only the reconciliation itself is timed.
#[derive(Debug, Clone)]
pub enum Reconciler {
    Base,
    Pbu,
    Projection(WeightSpec),
    Ukf {
        sigma_b: DMatrix<f64>,
        sigma_u: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Reconciled {
    pub cloud: SampleCloud,
    pub diagnostics: Option<ProjectionDiagnostics>,
}

impl Reconciler {
    pub fn prepare(method: Method, spec: &HierarchySpec, residuals: Option<&ResidualMatrix>) -> Result<Self> {
        if method.needs_residuals() && residuals.is_none() {
            return Err(ReconError::Config(format!("method {method} needs in-sample residuals")));
        }
        Ok(match method {
            Method::Base => Reconciler::Base,
            Method::Pbu => Reconciler::Pbu,
            Method::ProjOls | Method::ProjWls | Method::ProjFull => {
                let kind = method.weight_kind().expect("projection method");
                Reconciler::Projection(weight_matrix(kind, spec.n(), residuals)?)
            }
            Method::Ukf => {
                let r = residuals.expect("checked above");
                if r.n() != spec.n() {
                    return Err(ReconError::DimensionMismatch {
                        context: "residual columns",
                        expected: spec.n(),
                        got: r.n(),
                    });
                }
                let cov = shrink_cov(r)?.cov;
                let (n_u, n_b) = (spec.n_u(), spec.n_b());
                Reconciler::Ukf {
                    sigma_b: cov.view((n_u, n_u), (n_b, n_b)).into_owned(),
                    sigma_u: cov.view((0, 0), (n_u, n_u)).into_owned(),
                }
            }
        })
    }

    /// `seed` only matters for the UKF, which draws `base.m()` posterior samples.
    pub fn reconcile(
        &self,
        spec: &HierarchySpec,
        base: &SampleCloud,
        settings: &ReconcileSettings,
        seed: u64,
    ) -> Result<Reconciled> {
        let plain = |cloud| Reconciled {
            cloud,
            diagnostics: None,
        };
        match self {
            Reconciler::Base => Ok(plain(base.clone())),
            Reconciler::Pbu => Ok(plain(pbu_reconcile(spec, base)?)),
            Reconciler::Projection(w) => {
                let (cloud, diag) = project_cloud(spec, w, base, &settings.projection)?;
                Ok(Reconciled {
                    cloud,
                    diagnostics: Some(diag),
                })
            }
            Reconciler::Ukf { sigma_b, sigma_u } => {
                if base.n() != spec.n() {
                    return Err(ReconError::DimensionMismatch {
                        context: "base cloud columns",
                        expected: spec.n(),
                        got: base.n(),
                    });
                }
                let (n_u, n_b) = (spec.n_u(), spec.n_b());
                let means = base.column_means();
                let prior = GaussianDist::new(means.rows(n_u, n_b).into_owned(), sigma_b.clone())?;
                let u_hat = means.rows(0, n_u).into_owned();
                let result = ukf_reconcile(spec, &prior, &u_hat, sigma_u, &settings.ut)?;
                Ok(plain(sample_posterior(&result, spec, base.m(), seed)?))
            }
        }
    }
}

/// Seed of the posterior draw for one `(label, window, method)` triple.
pub fn method_seed(master: u64, label: &str, window: usize, method: Method) -> u64 {
    derive_seed(master, &[label.into(), window.into(), method.as_str().into()])
}

/// Scores of one method over a sequence of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub windows: Vec<WindowScore>,
    /// Wall time of each reconcile call, seconds.
    pub runtimes: Vec<f64>,
    pub max_coherence_residual: f64,
    pub coherence_violations: usize,
    pub fallbacks: usize,
}

/// Window inputs to [`evaluate_windows`].
pub struct WindowInput<'a> {
    pub base: &'a SampleCloud,
    pub truth: &'a [f64],
}

/// Reconciles, verifies and scores every window with every method.
///
/// Windows run in parallel; results are ordered and independent of the
/// worker count. When `verify` is set an incoherent output is an error.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_windows(
    spec: &HierarchySpec,
    windows: &[WindowInput<'_>],
    residuals: Option<&ResidualMatrix>,
    methods: &[Method],
    settings: &ReconcileSettings,
    master_seed: u64,
    label: &str,
    verify: bool,
) -> Result<Vec<MethodRun>> {
    let reconcilers: Vec<(Method, Reconciler)> = methods
        .iter()
        .map(|&m| {
            Ok((
                m,
                Reconciler::prepare(m, spec, residuals).map_err(|e| e.context(format!("{label}/{m}")))?,
            ))
        })
        .collect::<Result<_>>()?;

    struct Cell {
        score: WindowScore,
        runtime: f64,
        residual: f64,
        coherent: bool,
        fallbacks: usize,
    }

    let per_window: Vec<Vec<Cell>> = windows
        .par_iter()
        .enumerate()
        .map(|(w, input)| {
            reconcilers
                .iter()
                .map(|(method, rec)| {
                    let ctx = |e: ReconError| e.context(format!("{label}/{method}/window {w}"));
                    let seed = method_seed(master_seed, label, w, *method);
                    let start = Instant::now();
                    let out = rec.reconcile(spec, input.base, settings, seed).map_err(ctx)?;
                    let runtime = start.elapsed().as_secs_f64();
                    let (residual, coherent) = match method.coherence_tol() {
                        Some(tol) => {
                            let report = coherence_check(spec, &out.cloud, tol).map_err(ctx)?;
                            (report.max_residual, report.is_coherent())
                        }
                        None => (0.0, true),
                    };
                    if verify && !coherent {
                        return Err(ctx(ReconError::Incoherent {
                            method: method.to_string(),
                            max_residual: residual,
                            tol: method.coherence_tol().unwrap_or(0.0),
                        }));
                    }
                    let score = score_window(&out.cloud, input.truth).map_err(ctx)?;
                    Ok(Cell {
                        score,
                        runtime,
                        residual,
                        coherent,
                        fallbacks: out.diagnostics.map_or(0, |d| d.fallback_count),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    Ok(reconcilers
        .iter()
        .enumerate()
        .map(|(k, (method, _))| {
            let cells = per_window.iter().map(|row| &row[k]);
            MethodRun {
                method: *method,
                windows: cells.clone().map(|c| c.score.clone()).collect(),
                runtimes: cells.clone().map(|c| c.runtime).collect(),
                max_coherence_residual: cells.clone().map(|c| c.residual).fold(0.0, f64::max),
                coherence_violations: cells.clone().filter(|c| !c.coherent).count(),
                fallbacks: cells.map(|c| c.fallbacks).sum(),
            }
        })
        .collect())
}

/// Relative scores of each run against the `base` run.
pub fn relative_reports(runs: &[MethodRun]) -> Result<Vec<(Method, ScoreReport)>> {
    let base = runs
        .iter()
        .find(|r| r.method == Method::Base)
        .ok_or_else(|| ReconError::Config("relative scores need the `base` method".into()))?;
    let base_report = ScoreReport::from_windows(&base.windows, mean(&base.runtimes))?;
    runs.iter()
        .map(|r| {
            let report = ScoreReport::from_windows(&r.windows, mean(&r.runtimes))?.with_baseline(&base_report)?;
            Ok((r.method, report))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ensure_base(methods: &[Method]) -> Vec<Method> {
    let mut out = vec![Method::Base];
    out.extend(methods.iter().copied().filter(|m| *m != Method::Base));
    out
}

fn default_surfaces() -> Vec<ConstraintSpec> {
    ["paraboloid", "saddle", "ripples"]
        .into_iter()
        .map(|s| ConstraintSpec::new(s, Vec::new()))
        .collect()
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// Synthetic-study configuration (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub surfaces: Vec<ConstraintSpec>,
    pub methods: Vec<Method>,
    pub samples: usize,
    pub seed: u64,
    pub replications: usize,
    pub phi: Vec<f64>,
    pub noise_sd: Vec<f64>,
    pub length: usize,
    pub burn_in: usize,
    pub train_fraction: f64,
    pub n_test_steps: Option<usize>,
    #[serde(flatten)]
    pub settings: ReconcileSettings,
    pub verify: bool,
    /// Write base clouds, truth, residuals and an external-run manifest here.
    pub dump_dir: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            surfaces: default_surfaces(),
            methods: default_methods(),
            samples: 1000,
            seed: 0,
            replications: 5,
            phi: vec![0.9, 0.9],
            noise_sd: vec![0.1, 0.1],
            length: 1000,
            burn_in: crate::synth::DEFAULT_BURN_IN,
            train_fraction: 0.8,
            n_test_steps: None,
            settings: ReconcileSettings::default(),
            verify: true,
            dump_dir: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(ReconError::Config("no methods configured".into()));
        }
        if self.surfaces.is_empty() {
            return Err(ReconError::Config("no surfaces configured".into()));
        }
        if self.replications == 0 {
            return Err(ReconError::Config("replications must be at least 1".into()));
        }
        if self.samples < 2 {
            return Err(ReconError::Config("need at least 2 samples".into()));
        }
        self.settings.projection.validate()?;
        for s in &self.surfaces {
            s.build()?;
        }
        Ok(())
    }
}

pub fn surface_label(spec: &ConstraintSpec) -> String {
    if spec.params.is_empty() {
        spec.name.clone()
    } else {
        let p: Vec<String> = spec.params.iter().map(|v| v.to_string()).collect();
        format!("{}[{}]", spec.name, p.join(","))
    }
}

/// One `(surface, method)` cell, averaged over replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationCell {
    pub surface: String,
    pub method: Method,
    pub rel_crps: f64,
    pub rel_es: f64,
    pub rel_crps_per_rep: Vec<f64>,
    pub rel_es_per_rep: Vec<f64>,
    pub mean_runtime: f64,
    pub max_coherence_residual: f64,
    pub coherence_violations: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutput {
    pub surfaces: Vec<String>,
    pub methods: Vec<Method>,
    pub samples: usize,
    pub cells: Vec<SimulationCell>,
}

impl SimulationOutput {
    pub fn cell(&self, surface: &str, method: Method) -> Option<&SimulationCell> {
        self.cells.iter().find(|c| c.surface == surface && c.method == method)
    }

    pub fn total_violations(&self) -> usize {
        self.cells.iter().map(|c| c.coherence_violations).sum()
    }

    /// Rows = methods, columns = surfaces x {CRPS, ES}.
    pub fn score_table(&self) -> Table {
        let mut header = vec!["method".to_string()];
        header.extend(self.surfaces.iter().map(|s| format!("crps:{s}")));
        header.extend(self.surfaces.iter().map(|s| format!("es:{s}")));
        let rows = self
            .methods
            .iter()
            .map(|&m| {
                let mut row = vec![Cell::Text(m.to_string())];
                for s in &self.surfaces {
                    row.push(Cell::Num(self.cell(s, m).map_or(f64::NAN, |c| c.rel_crps)));
                }
                for s in &self.surfaces {
                    row.push(Cell::Num(self.cell(s, m).map_or(f64::NAN, |c| c.rel_es)));
                }
                row
            })
            .collect();
        Table { header, rows }
    }

    /// Mean per-step reconciliation wall time, seconds.
    pub fn runtime_table(&self) -> Table {
        let mut header = vec!["method".to_string()];
        header.extend(self.surfaces.iter().cloned());
        let rows = self
            .methods
            .iter()
            .filter(|m| **m != Method::Base)
            .map(|&m| {
                let mut row = vec![Cell::Text(m.to_string())];
                for s in &self.surfaces {
                    row.push(Cell::Sci(self.cell(s, m).map_or(f64::NAN, |c| c.mean_runtime)));
                }
                row
            })
            .collect();
        Table { header, rows }
    }
}

struct RepResult {
    rel_crps: f64,
    rel_es: f64,
    runtime: f64,
    max_residual: f64,
    violations: usize,
    fallbacks: usize,
}

/// Runs generate -> fit -> reconcile -> score for every surface, method and
/// replication. Relative scores are computed per replication against `base`
/// and then averaged.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationOutput> {
    cfg.validate()?;
    let methods = ensure_base(&cfg.methods);
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for surface in &cfg.surfaces {
        let label = surface_label(surface);
        let spec = HierarchySpec::from_spec(surface)?;
        let mut per_method: BTreeMap<Method, Vec<RepResult>> = BTreeMap::new();
        for rep in 0..cfg.replications {
            let rep_seed = derive_seed(cfg.seed, &[label.as_str().into(), "replication".into(), rep.into()]);
            let ar1 = Ar1Config {
                phi: cfg.phi.clone(),
                noise_sd: cfg.noise_sd.clone(),
                t: cfg.length,
                seed: derive_seed(rep_seed, &["data".into()]),
                burn_in: cfg.burn_in,
            };
            let data = generate(&ar1, &spec).map_err(|e| e.context(format!("{label}: generate")))?;
            let split = SplitConfig {
                train_fraction: cfg.train_fraction,
                samples: cfg.samples,
                seed: derive_seed(rep_seed, &["bootstrap".into()]),
                n_test_steps: cfg.n_test_steps,
            };
            let forecasts = fit_and_forecast(&data, &split).map_err(|e| e.context(format!("{label}: forecast")))?;
            if let Some(dir) = &cfg.dump_dir {
                dump_replication(dir, &label, rep, rep_seed, surface, &spec, &forecasts, cfg)?;
            }
            let inputs: Vec<WindowInput<'_>> = forecasts
                .windows
                .iter()
                .map(|w| WindowInput {
                    base: &w.base,
                    truth: &w.truth,
                })
                .collect();
            let runs = evaluate_windows(
                &spec,
                &inputs,
                Some(&forecasts.fit.residuals),
                &methods,
                &cfg.settings,
                rep_seed,
                &label,
                cfg.verify,
            )?;
            let reports = relative_reports(&runs)?;
            for (run, (method, report)) in runs.iter().zip(reports) {
                per_method.entry(method).or_default().push(RepResult {
                    rel_crps: report.rel_crps_gm.unwrap_or(f64::NAN),
                    rel_es: report.rel_es.unwrap_or(f64::NAN),
                    runtime: report.runtime_seconds,
                    max_residual: run.max_coherence_residual,
                    violations: run.coherence_violations,
                    fallbacks: run.fallbacks,
                });
            }
        }
        for &method in &methods {
            let reps = &per_method[&method];
            cells.push(SimulationCell {
                surface: label.clone(),
                method,
                rel_crps: mean(&reps.iter().map(|r| r.rel_crps).collect::<Vec<_>>()),
                rel_es: mean(&reps.iter().map(|r| r.rel_es).collect::<Vec<_>>()),
                rel_crps_per_rep: reps.iter().map(|r| r.rel_crps).collect(),
                rel_es_per_rep: reps.iter().map(|r| r.rel_es).collect(),
                mean_runtime: mean(&reps.iter().map(|r| r.runtime).collect::<Vec<_>>()),
                max_coherence_residual: reps.iter().map(|r| r.max_residual).fold(0.0, f64::max),
                coherence_violations: reps.iter().map(|r| r.violations).sum(),
                fallbacks: reps.iter().map(|r| r.fallbacks).sum(),
            });
        }
        labels.push(label);
    }
    Ok(SimulationOutput {
        surfaces: labels,
        methods,
        samples: cfg.samples,
        cells,
    })
}

#[allow(clippy::too_many_arguments)]
fn dump_replication(
    dir: &Path,
    label: &str,
    rep: usize,
    rep_seed: u64,
    surface: &ConstraintSpec,
    spec: &HierarchySpec,
    forecasts: &crate::synth::BaseForecasts,
    cfg: &SimulationConfig,
) -> Result<()> {
    let root = dir.join(label).join(format!("rep{rep:03}"));
    let mut clouds = Vec::new();
    for (w, window) in forecasts.windows.iter().enumerate() {
        let path = root.join(format!("window_{w:05}.csv"));
        io::write_cloud(&path, spec.n_u(), &window.base)?;
        clouds.push(PathBuf::from(format!("window_{w:05}.csv")));
    }
    let truth = DMatrix::from_fn(forecasts.windows.len(), spec.n(), |i, j| forecasts.windows[i].truth[j]);
    io::write_series_csv(&root.join("truth.csv"), spec.n_u(), &truth)?;
    io::write_residuals(&root.join("residuals.csv"), spec.n_u(), &forecasts.fit.residuals)?;
    let manifest = ExternalConfig {
        constraint: surface.clone(),
        clouds,
        truth: PathBuf::from("truth.csv"),
        residuals: Some(PathBuf::from("residuals.csv")),
        methods: cfg.methods.clone(),
        seed: rep_seed,
        label: label.to_string(),
        settings: cfg.settings,
        verify: cfg.verify,
    };
    std::fs::write(root.join("external.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Externally produced base clouds, one file per window (JSON).
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub constraint: ConstraintSpec,
    pub clouds: Vec<PathBuf>,
    pub truth: PathBuf,
    #[serde(default)]
    pub residuals: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(flatten, default)]
    pub settings: ReconcileSettings,
    #[serde(default = "default_true")]
    pub verify: bool,
}

fn default_label() -> String {
    "external".into()
}

fn default_true() -> bool {
    true
}

impl ExternalConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReconError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.clouds.iter_mut().for_each(fix);
        fix(&mut self.truth);
        if let Some(r) = self.residuals.as_mut() {
            fix(r);
        }
    }

    /// Checks methods and file presence before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(ReconError::Config("no methods configured".into()));
        }
        if self.clouds.is_empty() {
            return Err(ReconError::Config("no cloud files configured".into()));
        }
        if let Some(m) = self.methods.iter().find(|m| m.needs_residuals()) {
            match &self.residuals {
                None => return Err(ReconError::Config(format!("method {m} needs a residual file"))),
                Some(p) if !p.exists() => {
                    return Err(ReconError::Config(format!(
                        "residual file {} not found (needed by {m})",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        for p in self.clouds.iter().chain(std::iter::once(&self.truth)) {
            if !p.exists() {
                return Err(ReconError::Config(format!("file {} not found", p.display())));
            }
        }
        self.settings.projection.validate()?;
        self.constraint.build()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalOutput {
    pub label: String,
    pub windows: usize,
    pub reports: Vec<(Method, ScoreReport)>,
    pub runs: Vec<MethodRun>,
}

impl ExternalOutput {
    pub fn report(&self, method: Method) -> Option<&ScoreReport> {
        self.reports.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }

    pub fn score_table(&self) -> Table {
        let header = ["method", "rel_crps_gm", "rel_es", "es", "runtime_s"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = self
            .reports
            .iter()
            .map(|(m, r)| {
                vec![
                    Cell::Text(m.to_string()),
                    Cell::Num(r.rel_crps_gm.unwrap_or(f64::NAN)),
                    Cell::Num(r.rel_es.unwrap_or(f64::NAN)),
                    Cell::Num(r.es),
                    Cell::Sci(r.runtime_seconds),
                ]
            })
            .collect();
        Table { header, rows }
    }
}

/// Reconciles and scores externally produced per-window clouds.
pub fn run_external(cfg: &ExternalConfig) -> Result<ExternalOutput> {
    cfg.validate()?;
    let spec = HierarchySpec::from_spec(&cfg.constraint)?;
    let check_layout = |n_u: usize, what: &Path| {
        if n_u != spec.n_u() {
            return Err(ReconError::Config(format!(
                "{} has {n_u} constrained columns, constraint expects {}",
                what.display(),
                spec.n_u()
            )));
        }
        Ok(())
    };
    let mut clouds = Vec::with_capacity(cfg.clouds.len());
    for path in &cfg.clouds {
        let (n_u, cloud) = io::read_cloud(path)?;
        check_layout(n_u, path)?;
        if let Some(first) = clouds.first() {
            let first: &SampleCloud = first;
            if first.n() != cloud.n() || first.m() != cloud.m() {
                return Err(ReconError::Config(format!(
                    "{} is {}x{}, earlier windows are {}x{}",
                    path.display(),
                    cloud.m(),
                    cloud.n(),
                    first.m(),
                    first.n()
                )));
            }
        }
        clouds.push(cloud);
    }
    let (n_u, truth) = io::read_series_csv(&cfg.truth)?;
    check_layout(n_u, &cfg.truth)?;
    if truth.nrows() != clouds.len() || truth.ncols() != spec.n() {
        return Err(ReconError::Config(format!(
            "truth has {} rows for {} windows",
            truth.nrows(),
            clouds.len()
        )));
    }
    let residuals = match &cfg.residuals {
        Some(p) => {
            let (n_u, r) = io::read_residuals(p)?;
            check_layout(n_u, p)?;
            Some(r)
        }
        None => None,
    };
    let truth_rows: Vec<Vec<f64>> = (0..truth.nrows())
        .map(|i| truth.row(i).iter().copied().collect())
        .collect();
    let inputs: Vec<WindowInput<'_>> = clouds
        .iter()
        .zip(&truth_rows)
        .map(|(base, t)| WindowInput { base, truth: t })
        .collect();
    let methods = ensure_base(&cfg.methods);
    let runs = evaluate_windows(
        &spec,
        &inputs,
        residuals.as_ref(),
        &methods,
        &cfg.settings,
        cfg.seed,
        &cfg.label,
        cfg.verify,
    )?;
    let reports = relative_reports(&runs)?;
    Ok(ExternalOutput {
        label: cfg.label.clone(),
        windows: clouds.len(),
        reports,
        runs,
    })
}

/// Per-step wall time of each method on the first `steps` test windows,
/// run one window at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub surfaces: Vec<ConstraintSpec>,
    pub methods: Vec<Method>,
    pub samples: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub settings: ReconcileSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            surfaces: default_surfaces(),
            methods: vec![Method::ProjFull, Method::Ukf],
            samples: 2000,
            steps: 3,
            seed: 0,
            settings: ReconcileSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOutput {
    pub surfaces: Vec<String>,
    pub methods: Vec<Method>,
    pub samples: usize,
    /// `(surface, method) -> mean seconds per step`.
    pub timings: Vec<(String, Method, f64)>,
}

impl BenchOutput {
    pub fn seconds(&self, surface: &str, method: Method) -> Option<f64> {
        self.timings
            .iter()
            .find(|(s, m, _)| s == surface && *m == method)
            .map(|t| t.2)
    }

    pub fn table(&self) -> Table {
        let mut header = vec!["method".to_string()];
        header.extend(self.surfaces.iter().cloned());
        let rows = self
            .methods
            .iter()
            .map(|&m| {
                let mut row = vec![Cell::Text(m.to_string())];
                for s in &self.surfaces {
                    row.push(Cell::Sci(self.seconds(s, m).unwrap_or(f64::NAN)));
                }
                row
            })
            .collect();
        Table { header, rows }
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutput> {
    if cfg.methods.is_empty() || cfg.steps == 0 {
        return Err(ReconError::Config("bench needs methods and at least one step".into()));
    }
    let mut timings = Vec::new();
    let mut labels = Vec::new();
    for surface in &cfg.surfaces {
        let label = surface_label(surface);
        let spec = HierarchySpec::from_spec(surface)?;
        let seed = derive_seed(cfg.seed, &[label.as_str().into(), "bench".into()]);
        let data = generate(
            &Ar1Config {
                seed: derive_seed(seed, &["data".into()]),
                ..Default::default()
            },
            &spec,
        )?;
        let forecasts = fit_and_forecast(
            &data,
            &SplitConfig {
                samples: cfg.samples,
                seed: derive_seed(seed, &["bootstrap".into()]),
                n_test_steps: Some(cfg.steps),
                ..Default::default()
            },
        )?;
        for &method in &cfg.methods {
            let rec = Reconciler::prepare(method, &spec, Some(&forecasts.fit.residuals))?;
            let mut total = 0.0;
            for (w, window) in forecasts.windows.iter().enumerate() {
                let start = Instant::now();
                rec.reconcile(&spec, &window.base, &cfg.settings, method_seed(seed, &label, w, method))?;
                total += start.elapsed().as_secs_f64();
            }
            timings.push((label.clone(), method, total / forecasts.windows.len() as f64));
        }
        labels.push(label);
    }
    Ok(BenchOutput {
        surfaces: labels,
        methods: cfg.methods.clone(),
        samples: cfg.samples,
        timings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    /// Relative scores: four decimals in text, full precision in CSV.
    Num(f64),
    /// Timings: scientific notation.
    Sci(f64),
}

/// A small table renderable as aligned text or CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|c| match c {
                        Cell::Text(s) => s.clone(),
                        Cell::Num(v) => format!("{v:.4}"),
                        Cell::Sci(v) => format!("{v:.3e}"),
                    })
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..self.header.len())
            .map(|j| {
                cells
                    .iter()
                    .map(|r| r[j].len())
                    .chain(std::iter::once(self.header[j].len()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if j == 0 {
                        format!("{s:<w$}", w = widths[j])
                    } else {
                        format!("{s:>w$}", w = widths[j])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule);
        for r in &cells {
            line(&mut out, r);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let fields: Vec<String> = r
                .iter()
                .map(|c| match c {
                    Cell::Text(s) => s.clone(),
                    Cell::Num(v) | Cell::Sci(v) => io::format_value(*v),
                })
                .collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}
