use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use nlrecon::experiment::{
    run_bench, run_external, run_simulation, BenchConfig, ExternalConfig, Method, ReconcileSettings, Reconciler,
    SimulationConfig, Table,
};
use nlrecon::{coherence_check, io, score_window, ConstraintSpec, HierarchySpec, WeightKind};

#[derive(Parser)]
#[command(
    name = "nlrecon",
    version,
    about = "Probabilistic forecast reconciliation under nonlinear constraints"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic study: generate, forecast, reconcile and score.
    Simulate(SimulateArgs),
    /// Reconcile a single cloud CSV.
    Reconcile(ReconcileArgs),
    /// Energy score and CRPS of a cloud against an observation.
    Score(ScoreArgs),
    /// Per-step reconciliation wall time.
    Bench(BenchArgs),
    /// Reconcile and score externally produced per-window clouds.
    External(ExternalArgs),
}

#[derive(Args, Default)]
struct SolverArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
}

impl SolverArgs {
    fn apply(&self, s: &mut ReconcileSettings) {
        if let Some(v) = self.alpha {
            s.ut.alpha = v;
        }
        if let Some(v) = self.beta {
            s.ut.beta = v;
        }
        if let Some(v) = self.kappa {
            s.ut.kappa = Some(v);
        }
        if let Some(v) = self.max_iter {
            s.projection.max_iter = v;
        }
        if let Some(v) = self.grad_tol {
            s.projection.grad_tol = v;
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated surfaces, e.g. `paraboloid,saddle`.
    #[arg(long, value_delimiter = ',')]
    surfaces: Option<Vec<String>>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    n_test_steps: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write base clouds, truth, residuals and an `external.json` per replication.
    #[arg(long)]
    dump_clouds: bool,
    /// Skip the coherence assertion on reconciled clouds.
    #[arg(long)]
    no_verify: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReconcileArgs {
    /// Constraint name, e.g. `paraboloid` or `ratio`.
    #[arg(long)]
    constraint: String,
    /// Comma-separated constraint parameters.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    params: Vec<f64>,
    /// `pbu`, `proj`, `ukf`, or a full method name such as `proj-wls`.
    /// The UKF draws as many samples as the input cloud has rows.
    #[arg(long)]
    method: String,
    /// Projection metric when `--method proj`.
    #[arg(long, default_value = "ols")]
    weights: String,
    #[arg(long)]
    input: PathBuf,
    /// In-sample residual CSV (needed for wls, full and ukf).
    #[arg(long)]
    residuals: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// CSV with a single observation row.
    #[arg(long)]
    truth: PathBuf,
    /// Optional baseline cloud for relative scores.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    surfaces: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExternalArgs {
    /// JSON manifest listing cloud, truth and residual files.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    no_verify: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names
        .iter()
        .map(|n| n.trim().parse::<Method>().map_err(Into::into))
        .collect()
}

fn parse_surfaces(names: &[String]) -> Vec<ConstraintSpec> {
    names
        .iter()
        .map(|n| ConstraintSpec::new(n.trim(), Vec::new()))
        .collect()
}

fn emit(out_dir: &Path, name: &str, title: &str, table: &Table) -> Result<()> {
    println!("{title}");
    print!("{}", table.to_text());
    println!();
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join(format!("{name}.csv"));
    fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SimulationConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimulationConfig::default(),
    };
    if let Some(s) = &args.surfaces {
        cfg.surfaces = parse_surfaces(s);
    }
    if let Some(m) = &args.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(v) = args.samples {
        cfg.samples = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.replications {
        cfg.replications = v;
    }
    if args.n_test_steps.is_some() {
        cfg.n_test_steps = args.n_test_steps;
    }
    args.solver.apply(&mut cfg.settings);
    if args.no_verify {
        cfg.verify = false;
    }
    if args.dump_clouds {
        cfg.dump_dir = Some(args.out_dir.join("clouds"));
    }
    info!("simulate: {} surfaces, M = {}", cfg.surfaces.len(), cfg.samples);
    let out = run_simulation(&cfg)?;
    emit(
        &args.out_dir,
        "scores",
        "Relative CRPS (geometric mean) and ES",
        &out.score_table(),
    )?;
    emit(
        &args.out_dir,
        "runtime",
        &format!("Mean reconciliation time per step, seconds (M = {})", out.samples),
        &out.runtime_table(),
    )?;
    let violations = out.total_violations();
    if violations > 0 {
        eprintln!("warning: {violations} incoherent windows");
    }
    Ok(())
}

fn reconcile(args: ReconcileArgs) -> Result<()> {
    let spec = HierarchySpec::builtin(&args.constraint, &args.params)?;
    let method = match args.method.as_str() {
        "proj" => match args.weights.parse::<WeightKind>()? {
            WeightKind::Ols => Method::ProjOls,
            WeightKind::Wls => Method::ProjWls,
            WeightKind::Full => Method::ProjFull,
        },
        other => other.parse()?,
    };
    let (n_u, base) = io::read_cloud(&args.input)?;
    if n_u != spec.n_u() || base.n() != spec.n() {
        bail!(
            "{} has layout ({n_u}, {}), constraint `{}` expects ({}, {})",
            args.input.display(),
            base.n() - n_u,
            args.constraint,
            spec.n_u(),
            spec.n_b()
        );
    }
    let residuals = match &args.residuals {
        Some(p) => Some(io::read_residuals(p)?.1),
        None => None,
    };
    let rec = Reconciler::prepare(method, &spec, residuals.as_ref())?;
    let mut settings = ReconcileSettings::default();
    args.solver.apply(&mut settings);
    let out = rec.reconcile(&spec, &base, &settings, args.seed)?;
    if let Some(tol) = method.coherence_tol() {
        let report = coherence_check(&spec, &out.cloud, tol)?;
        info!("max coherence residual {:e}", report.max_residual);
    }
    if let Some(d) = &out.diagnostics {
        if d.fallback_count > 0 {
            eprintln!("warning: {} samples fell back to bottom-up", d.fallback_count);
        }
    }
    io::write_cloud(&args.output, spec.n_u(), &out.cloud)?;
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let (n_u, cloud) = io::read_cloud(&args.cloud)?;
    let (_, truth) = io::read_series_csv(&args.truth)?;
    if truth.nrows() != 1 {
        bail!("{} must hold exactly one observation row", args.truth.display());
    }
    let y: Vec<f64> = truth.row(0).iter().copied().collect();
    let s = score_window(&cloud, &y)?;
    let header = io::series_header(n_u, cloud.n() - n_u);
    println!("es,{}", io::format_value(s.es));
    for (h, c) in header.iter().zip(&s.crps) {
        println!("crps:{h},{}", io::format_value(*c));
    }
    if let Some(p) = &args.baseline {
        let (_, base) = io::read_cloud(p)?;
        let b = score_window(&base, &y)?;
        let (rel_es, rel_crps) = nlrecon::aggregate(&[s], &[b])?;
        println!("rel_es,{}", io::format_value(rel_es));
        println!("rel_crps_gm,{}", io::format_value(rel_crps));
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig {
        samples: args.samples,
        steps: args.steps,
        seed: args.seed,
        ..Default::default()
    };
    if let Some(s) = &args.surfaces {
        cfg.surfaces = parse_surfaces(s);
    }
    if let Some(m) = &args.methods {
        cfg.methods = parse_methods(m)?;
    }
    args.solver.apply(&mut cfg.settings);
    let out = run_bench(&cfg)?;
    emit(
        &args.out_dir,
        "bench",
        &format!("Mean reconciliation time per step, seconds (M = {})", out.samples),
        &out.table(),
    )
}

fn external(args: ExternalArgs) -> Result<()> {
    let mut cfg = ExternalConfig::load(&args.config)?;
    if let Some(m) = &args.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    args.solver.apply(&mut cfg.settings);
    if args.no_verify {
        cfg.verify = false;
    }
    let out = run_external(&cfg)?;
    emit(
        &args.out_dir,
        "external",
        &format!("{}: relative scores over {} windows", out.label, out.windows),
        &out.score_table(),
    )
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconcile(a) => reconcile(a),
        Command::Score(a) => score(a),
        Command::Bench(a) => bench(a),
        Command::External(a) => external(a),
    }
}
