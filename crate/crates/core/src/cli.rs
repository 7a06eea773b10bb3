//! Batch driver: `parastab <subcommand> --config <path> --out <dir>`.
//!
//! Every run writes `<tag>.<subcommand>.json` plus one CSV per report
//! table. Wall-clock times go to a `.timing.json` sidecar so the report
//! itself depends only on the config and the seed.

use std::cell::OnceCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, WarmStartPolicy};
use crate::error::{Error, Result};
use crate::forward::{tail_check, ControlTrajectory, Trajectory};
use crate::mesh::Field;
use crate::model::{random_smooth_field, ProblemSpec};
use crate::optimize::{solve_ocp_with_tol, OptimalityResult, WarmStart};
use crate::stabilize::{closed_loop_trials, gain_for_spec, smallness_estimates, stability_margin_capped};
use crate::verify::{
    brute_force_value, curvature_trend, dp_consistency, feedback_closed_loop, fixed_point_certificate,
    gradient_fd_check, hjb_residual, hjb_terms, inactivity_time, lipschitz_probe, second_order_check,
    ExperimentReport, GradCheckOptions, LipschitzOptions, Table, Verdict,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "parastab", version, about = "Optimal stabilization experiments for semilinear parabolic equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the control problem; writes costs, residuals and trajectories.
    Solve(RunArgs),
    /// Riccati gain, smallness constants and closed-loop trials.
    Stabilize(RunArgs),
    /// Finite-difference check of the value-function gradient.
    GradCheck(RunArgs),
    /// HJB residuals along the optimal trajectory.
    HjbScan(RunArgs),
    /// Lipschitz stability of the solution map in the initial state.
    Lipschitz(RunArgs),
    /// Smallest eigenvalue of the reduced Hessian.
    SecondOrder(RunArgs),
    /// Receding-horizon closed loop, fixed-point certificate, inactivity time.
    FeedbackSim(RunArgs),
    /// Brute-force values against the solver on a tiny instance.
    Oracle(RunArgs),
    /// Every experiment above, merged into one report.
    All(RunArgs),
    /// Check a config without running it.
    Validate(ValidateArgs),
    /// Flatten report tables into plot-ready CSVs.
    EmitPlotData(PlotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for independent probe solves; defaults to the
    /// available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON files.
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Solve,
    Stabilize,
    GradCheck,
    HjbScan,
    Lipschitz,
    SecondOrder,
    FeedbackSim,
    Oracle,
    All,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Solve => "solve",
            Experiment::Stabilize => "stabilize",
            Experiment::GradCheck => "grad-check",
            Experiment::HjbScan => "hjb-scan",
            Experiment::Lipschitz => "lipschitz",
            Experiment::SecondOrder => "second-order",
            Experiment::FeedbackSim => "feedback-sim",
            Experiment::Oracle => "oracle",
            Experiment::All => "all",
        }
    }

    /// Components of `all`, in report order.
    pub const SUITE: [Experiment; 8] = [
        Experiment::Solve,
        Experiment::Stabilize,
        Experiment::GradCheck,
        Experiment::HjbScan,
        Experiment::Lipschitz,
        Experiment::SecondOrder,
        Experiment::FeedbackSim,
        Experiment::Oracle,
    ];
}

/// Result of one experiment: the report, extra files keyed by suffix, and
/// the error that cut the run short, if any.
#[derive(Debug)]
pub struct Outcome {
    pub report: ExperimentReport,
    pub files: Vec<(String, String)>,
    pub error: Option<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.error.is_some() {
            EXIT_ERROR
        } else if self.report.passed() {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }
}

fn solve_with(policy: WarmStartPolicy, spec: &ProblemSpec) -> Result<OptimalityResult> {
    let tol = spec.tolerances().optimizer;
    match policy {
        WarmStartPolicy::Feedback => solve_ocp_with_tol(spec, None, tol),
        WarmStartPolicy::Zero => {
            let zero = ControlTrajectory::zeros(spec.dt(), spec.steps(), spec.actuator_count());
            let mut r = solve_ocp_with_tol(spec, Some(zero), tol)?;
            r.warm_start = WarmStart::Zero;
            Ok(r)
        }
    }
}

/// Shared state of one run: the spec and the base solve, computed once.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    spec: ProblemSpec,
    base: OnceCell<OptimalityResult>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Self { cfg, spec: cfg.to_spec()?, base: OnceCell::new() })
    }

    /// The converged base solve; an error if the solver stalls.
    fn base(&self) -> Result<&OptimalityResult> {
        if self.base.get().is_none() {
            let r = solve_with(self.cfg.solver.warm_start, &self.spec)?;
            let _ = self.base.set(r);
        }
        let r = self.base.get().expect("set above");
        if !r.converged {
            return Err(Error::NotConverged { residual: r.residual, iterations: r.iterations });
        }
        Ok(r)
    }

    fn raw_base(&self) -> Result<&OptimalityResult> {
        match self.base() {
            Ok(r) => Ok(r),
            Err(Error::NotConverged { .. }) => Ok(self.base.get().expect("solve ran")),
            Err(e) => Err(e),
        }
    }
}

fn norm_table(spec: &ProblemSpec, y: &Trajectory, u: &ControlTrajectory, p: Option<&Trajectory>) -> Table {
    let mesh = spec.mesh();
    let n = y.steps();
    let mut cols = vec!["t", "norm_L2_y", "norm_U_u"];
    if p.is_some() {
        cols.push("norm_L2_p");
    }
    let mut t = Table::new(&cols);
    let un = u.pointwise_norms();
    for k in 0..=n {
        // u_k acts on (t_k, t_{k+1}]; the last node repeats the last value
        let mut row = vec![y.time(k), mesh.norm_l2(y.state(k)), un.get(k.min(un.len().saturating_sub(1))).copied().unwrap_or(0.0)];
        if let Some(p) = p {
            row.push(mesh.norm_l2(p.state(k)));
        }
        t.push(row);
    }
    t
}

fn nodal_csv(times: impl Iterator<Item = f64>, rows: &[Vec<f64>], prefix: &str) -> String {
    let width = rows.first().map_or(0, |r| r.len());
    let mut out = String::from("t");
    for i in 0..width {
        let _ = write!(out, ",{prefix}{i}");
    }
    out.push('\n');
    for (t, r) in times.zip(rows) {
        let _ = write!(out, "{t:e}");
        for v in r {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

fn solve(ctx: &Context, files: &mut Vec<(String, String)>) -> Result<ExperimentReport> {
    let spec = &ctx.spec;
    let r = ctx.raw_base()?;
    let mut report = ExperimentReport::new("solve", spec);
    report.metric("J", r.cost);
    report.metric("residual", r.residual);
    report.metric("fixed_point", r.fixed_point);
    report.metric("iterations", r.iterations as f64);
    report.metric("active_fraction", r.active_fraction);
    report.metric("max_control", r.ubar.max_norm());
    let tail = tail_check(spec.mesh(), &r.ybar, spec.tolerances().tail);
    report.metric("tail_decay_factor", tail.decay_factor);
    report.verdict(Verdict::holds("converged", r.converged));
    report.verdict(Verdict::holds("tail_decay", tail.passed));
    report.tables.insert("trajectory".into(), norm_table(spec, &r.ybar, &r.ubar, Some(&r.pbar)));
    let dt = spec.dt();
    files.push(("state.csv".into(), nodal_csv((0..=spec.steps()).map(|k| k as f64 * dt), r.ybar.states(), "y")));
    files.push(("control.csv".into(), nodal_csv((0..spec.steps()).map(|k| k as f64 * dt), r.ubar.values(), "u")));
    files.push(("adjoint.csv".into(), nodal_csv((0..=spec.steps()).map(|k| k as f64 * dt), r.pbar.states(), "p")));
    if !r.converged {
        report.note(format!("optimizer stopped at residual {:.3e} after {} iterations", r.residual, r.iterations));
    }
    Ok(report)
}

fn stabilize(ctx: &Context) -> Result<ExperimentReport> {
    let spec = &ctx.spec;
    let block = &ctx.cfg.experiment.stabilize;
    let seed = ctx.cfg.seed;
    let mut report = ExperimentReport::new("stabilize", spec);
    report.provenance.seed = Some(seed);
    let gain = gain_for_spec(spec, block.dense_cap)?;
    let margin = stability_margin_capped(spec.operator(), spec.control(), &gain.k, block.dense_cap)?;
    report.metric("riccati_residual", gain.riccati_residual);
    report.metric("closed_loop_margin", margin);
    report.verdict(Verdict::at_most("closed_loop_margin", margin, 0.0));

    let small = smallness_estimates(spec, &gain, block.samples, seed)?;
    report.metric("m_k", small.m_k);
    report.metric("lipschitz_c", small.lipschitz_c);
    report.metric("gain_norm", small.gain_norm);
    report.metric("embedding", small.embedding);
    if let Some(r) = small.radius_nonlinear {
        report.metric("radius_nonlinear", r);
    }
    if let Some(r) = small.radius_constraint {
        report.metric("radius_constraint", r);
    }
    let radius = match small.delta1 {
        Some(d) => {
            report.metric("delta1", d);
            d
        }
        None => {
            report.note("linear problem without constraint: every radius is admissible, trials use radius 1");
            1.0
        }
    };
    let trials = closed_loop_trials(spec, &gain, radius, block.trials, seed)?;
    let mut table = Table::new(&["trial_id", "y0_h1", "max_control", "tail_passed", "feasible"]);
    for (i, t) in trials.iter().enumerate() {
        table.push(vec![i as f64, t.y0_h1, t.max_control, t.tail_passed as u8 as f64, t.feasible as u8 as f64]);
    }
    report.metric("trials", trials.len() as f64);
    report.verdict(Verdict::holds("trials_decay", trials.iter().all(|t| t.tail_passed)));
    report.verdict(Verdict::holds("trials_feasible", trials.iter().all(|t| t.feasible)));
    report.tables.insert("trials".into(), table);
    Ok(report)
}

fn grad_check(ctx: &Context) -> Result<ExperimentReport> {
    let gc = &ctx.cfg.experiment.grad_check;
    let opts = GradCheckOptions {
        eps: gc.eps.clone(),
        max_rel_error: gc.max_rel_error,
        ratio: (gc.ratio[0], gc.ratio[1]),
        tol: gc.tol.unwrap_or(ctx.cfg.solver.tol),
        relative_step: gc.relative_step,
    };
    let dirs = ctx.cfg.grad_directions(ctx.spec.mesh());
    let mut report = gradient_fd_check(&ctx.spec, &dirs, &opts)?;
    report.provenance.seed = Some(ctx.cfg.seed);
    report.metric("directions", dirs.len() as f64);
    Ok(report)
}

fn hjb_scan(ctx: &Context) -> Result<ExperimentReport> {
    let spec = &ctx.spec;
    let block = &ctx.cfg.experiment.hjb;
    let base = ctx.base()?;
    let last = ((spec.steps() as f64) * block.span).floor() as usize;
    let states: Vec<Field> = (0..block.states)
        .map(|i| {
            let k = i * last / block.states.max(1);
            Field::new(base.ybar.state(k).to_vec())
        })
        .collect();
    let mut report = hjb_residual(spec, &states)?;
    let zero = hjb_terms(spec, &Field::zeros(spec.node_count()))?;
    let at_zero = zero.consistent.abs().max(zero.continuous.abs());
    report.metric("zero_state_residual", at_zero);
    report.verdict(Verdict::at_most("zero_state_residual", at_zero, 1e-12));
    Ok(report)
}

fn lipschitz(ctx: &Context) -> Result<ExperimentReport> {
    let block = &ctx.cfg.experiment.lipschitz;
    let opts = LipschitzOptions {
        pairs: block.pairs,
        eps: block.eps.clone(),
        seed: ctx.cfg.seed,
        tol: block.tol.unwrap_or(ctx.cfg.solver.tol),
        max_spread: block.max_spread,
    };
    lipschitz_probe(&ctx.spec, ctx.base()?, &opts)
}

fn second_order(ctx: &Context) -> Result<ExperimentReport> {
    let block = &ctx.cfg.experiment.second_order;
    let seed = ctx.cfg.seed;
    let check = second_order_check(&ctx.spec, ctx.base()?, block.krylov_dim, seed, block.coordinates)?;
    let mut report = check.report(&ctx.spec);
    report.provenance.seed = Some(seed);
    if check.coordinates != block.coordinates {
        report.note(format!("Hessian taken in {:?} coordinates", check.coordinates).to_lowercase());
    }
    if !block.trend.is_empty() {
        let trend = curvature_trend(&ctx.spec, &block.trend, block.krylov_dim, seed, block.coordinates)?;
        report.absorb("trend", trend);
    }
    Ok(report)
}

fn feedback_sim(ctx: &Context) -> Result<ExperimentReport> {
    let spec = &ctx.spec;
    let block = &ctx.cfg.experiment.feedback;
    let base = ctx.base()?;
    let every = block.resolve_every.unwrap_or((spec.steps() / 10).max(1));
    let mut report = ExperimentReport::new("feedback-sim", spec);
    report.provenance.seed = Some(ctx.cfg.seed);
    let sim = feedback_closed_loop(spec, base, every)?;
    report.metric("open_loop_cost", sim.open_loop_cost);
    report.metric("closed_loop_cost", sim.closed_loop_cost);
    report.metric("relative_gap", sim.relative_gap);
    report.metric("resolves", sim.resolves as f64);
    report.metric("resolve_every", every as f64);
    if let Some(t) = sim.failed_at {
        report.note(format!("receding-horizon re-solve failed at t = {t}"));
    }
    report.verdict(Verdict::holds("closed_loop_completed", sim.failed_at.is_none()));
    report.verdict(Verdict::at_most("relative_gap", sim.relative_gap, block.max_gap));
    report.verdict(Verdict::holds("closed_loop_tail_decay", sim.tail.passed));
    report.tables.insert("closed_loop".into(), norm_table(spec, &sim.trajectory, &sim.controls, None));

    report.absorb("certificate", fixed_point_certificate(spec, base, block.certificate_samples)?);

    match inactivity_time(base, spec) {
        Some(t_hat) => {
            report.metric("inactivity_time", t_hat);
            let eta = spec.admissible().eta();
            let from = (t_hat / spec.dt()).round() as usize;
            let late = base.active_points(eta)[from.min(spec.steps())..].iter().filter(|a| **a).count();
            report.metric("active_after_inactivity_time", late as f64);
            report.verdict(Verdict::holds("inactivity_time_finite", t_hat < spec.horizon()));
            report.verdict(Verdict::holds("inactive_after_inactivity_time", late == 0));
        }
        None => {
            report.note("the constraint never becomes inactive or the adjoint does not decay");
            report.verdict(Verdict::holds("inactivity_time_finite", false));
        }
    }
    if block.dp_probes > 0 {
        report.absorb("dp", dp_consistency(spec, base, block.dp_probes, ctx.cfg.seed)?);
    }
    Ok(report)
}

fn oracle(ctx: &Context) -> Result<ExperimentReport> {
    let spec = &ctx.spec;
    let block = &ctx.cfg.experiment.oracle;
    let seed = ctx.cfg.seed;
    let mesh = spec.mesh();
    let mut report = ExperimentReport::new("oracle", spec);
    report.provenance.seed = Some(seed);
    let scale = match mesh.norm_h1(spec.y0()) {
        n if n > 0.0 => n,
        _ => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![spec.y0().clone()];
    for _ in 0..block.instances {
        let r: f64 = rng.gen_range(0.2..1.0);
        data.push(random_smooth_field(mesh, &mut rng, 4).scaled(r * scale));
    }
    let policy = ctx.cfg.solver.warm_start;
    let rows: Vec<Result<(f64, f64, f64)>> = data
        .par_iter()
        .enumerate()
        .map(|(i, y0)| {
            let s = spec.with_y0(y0.clone())?;
            let o = brute_force_value(&s, block.restarts, seed.wrapping_add(i as u64))?;
            let r = solve_with(policy, &s)?;
            if !r.converged {
                return Err(Error::NotConverged { residual: r.residual, iterations: r.iterations });
            }
            Ok((mesh.norm_h1(y0), r.cost, o.value))
        })
        .collect();
    let mut table = Table::new(&["instance_id", "y0_h1", "solver", "oracle", "rel_gap"]);
    let mut worst: f64 = 0.0;
    for (i, row) in rows.into_iter().enumerate() {
        let (h1, v, o) = row?;
        let gap = if v == 0.0 { o.abs() } else { (o - v).abs() / v.abs() };
        worst = worst.max(gap);
        table.push(vec![i as f64, h1, v, o, gap]);
    }
    report.metric("instances", data.len() as f64);
    report.metric("max_rel_gap", worst);
    report.verdict(Verdict::at_most("max_rel_gap", worst, block.max_rel_gap));
    report.tables.insert("instances".into(), table);
    Ok(report)
}

fn oracle_fits(spec: &ProblemSpec) -> bool {
    spec.node_count() <= 16 && spec.steps() * spec.actuator_count() <= 64
}

fn run_one(ctx: &Context, exp: Experiment, files: &mut Vec<(String, String)>) -> Result<ExperimentReport> {
    match exp {
        Experiment::Solve => solve(ctx, files),
        Experiment::Stabilize => stabilize(ctx),
        Experiment::GradCheck => grad_check(ctx),
        Experiment::HjbScan => hjb_scan(ctx),
        Experiment::Lipschitz => lipschitz(ctx),
        Experiment::SecondOrder => second_order(ctx),
        Experiment::FeedbackSim => feedback_sim(ctx),
        Experiment::Oracle => oracle(ctx),
        Experiment::All => unreachable!("expanded by run_experiment"),
    }
}

/// Runs one experiment on a validated config. Errors are folded into the
/// outcome together with a diagnostic report.
pub fn run_experiment(cfg: &ExperimentConfig, exp: Experiment) -> Outcome {
    let mut files = Vec::new();
    let ctx = match Context::new(cfg) {
        Ok(c) => c,
        Err(e) => {
            let report = ExperimentReport { experiment: exp.name().into(), ..ExperimentReport::default() };
            return finish(cfg, report, files, Some(e.to_string()));
        }
    };
    let (report, error) = if exp == Experiment::All {
        let mut all = ExperimentReport::new("all", &ctx.spec);
        all.provenance.seed = Some(cfg.seed);
        let mut error = None;
        for part in Experiment::SUITE {
            if part == Experiment::Oracle && !oracle_fits(&ctx.spec) {
                all.note("oracle skipped: instance exceeds the brute-force size limits");
                continue;
            }
            let mut part_files = Vec::new();
            match run_one(&ctx, part, &mut part_files) {
                Ok(r) => all.absorb(part.name(), r),
                Err(e) => {
                    all.note(format!("{}: {e}", part.name()));
                    all.verdict(Verdict::holds(format!("{}.completed", part.name()), false));
                    error.get_or_insert_with(|| format!("{}: {e}", part.name()));
                }
            }
            files.extend(part_files.into_iter().map(|(name, body)| (format!("{}.{name}", part.name()), body)));
        }
        if let Some(base) = ctx.base.get() {
            all.provenance.warm_start = format!("{:?}", base.warm_start).to_lowercase();
        }
        (all, error)
    } else {
        match run_one(&ctx, exp, &mut files) {
            Ok(r) => {
                // a stalled base solve is a solver failure even though
                // the solve report itself was produced
                let stalled = ctx.base.get().filter(|b| !b.converged).map(|b| {
                    format!("optimizer did not converge: residual {:.3e} after {} iterations", b.residual, b.iterations)
                });
                (r, stalled)
            }
            Err(e) => {
                let mut r = ExperimentReport::new(exp.name(), &ctx.spec);
                r.note(format!("error: {e}"));
                if let Some(b) = ctx.base.get() {
                    r.metric("base.cost", b.cost);
                    r.metric("base.residual", b.residual);
                    r.metric("base.iterations", b.iterations as f64);
                }
                r.verdict(Verdict::holds("completed", false));
                (r, Some(e.to_string()))
            }
        }
    };
    let mut report = report;
    if report.provenance.warm_start.is_empty() {
        if let Some(b) = ctx.base.get() {
            report.provenance.warm_start = format!("{:?}", b.warm_start).to_lowercase();
        }
    }
    finish(cfg, report, files, error)
}

fn finish(cfg: &ExperimentConfig, mut report: ExperimentReport, files: Vec<(String, String)>, error: Option<String>) -> Outcome {
    report.tag = cfg.experiment.tag.clone();
    report.fingerprint = Some(cfg.fingerprint());
    if report.provenance.seed.is_none() {
        report.provenance.seed = Some(cfg.seed);
    }
    Outcome { report, files, error }
}

/// Writes the report, its tables and extra files under `out`; returns the
/// paths written.
pub fn persist(out: &Path, exp: Experiment, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let stem = format!("{}.{}", outcome.report.tag, exp.name());
    let mut written = Vec::new();
    let json = out.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    written.push(json);
    for (name, table) in &outcome.report.tables {
        let p = out.join(format!("{stem}.{name}.csv"));
        fs::write(&p, table.to_csv())?;
        written.push(p);
    }
    for (name, body) in &outcome.files {
        let p = out.join(format!("{stem}.{name}"));
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Invalid("--workers must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
}

fn run_args(args: &RunArgs, exp: Experiment) -> i32 {
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", args.config.display());
            return EXIT_ERROR;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let pool = match pool(args.workers) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_ERROR;
        }
    };
    let started = Instant::now();
    let outcome = pool.install(|| run_experiment(&cfg, exp));
    let elapsed = started.elapsed().as_secs_f64();
    print!("{}", outcome.report.summary());
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
    }
    let written = persist(&args.out, exp, &outcome).and_then(|mut w| {
        let sidecar = args.out.join(format!("{}.{}.timing.json", outcome.report.tag, exp.name()));
        let timing = serde_json::json!({ "elapsed_seconds": elapsed, "workers": pool.current_num_threads() });
        fs::write(&sidecar, serde_json::to_string_pretty(&timing)? + "\n")?;
        w.push(sidecar);
        Ok(w)
    });
    match written {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("cannot write results: {e}");
            EXIT_ERROR
        }
    }
}

/// Text printed by `validate` for a config that passed.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let d = cfg.derived();
    let mut out = String::from("OK\n");
    let _ = writeln!(out, "  tag               {}", cfg.experiment.tag);
    let _ = writeln!(out, "  nodes             {}", d.nodes);
    let _ = writeln!(out, "  steps             {}", d.steps);
    let _ = writeln!(out, "  actuators         {}", d.actuators);
    let _ = writeln!(out, "  control unknowns  {}", d.control_unknowns);
    let _ = writeln!(out, "  memory estimate   {:.1} MiB", d.memory_bytes as f64 / (1024.0 * 1024.0));
    let _ = writeln!(out, "  fingerprint       {}", cfg.fingerprint());
    out
}

fn validate(args: &ValidateArgs) -> i32 {
    match ExperimentConfig::load(&args.config) {
        Ok(cfg) => {
            print!("{}", describe(&cfg));
            EXIT_PASS
        }
        Err(e) => {
            eprintln!("{}: {e}", args.config.display());
            EXIT_ERROR
        }
    }
}

fn cell(v: &serde_json::Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:e}"),
        None => "NaN".into(),
    }
}

/// Columns kept per table kind; `None` keeps every column.
fn plot_columns(columns: &[String]) -> Option<Vec<&'static str>> {
    let has = |c: &str| columns.iter().any(|x| x == c);
    if has("eps") && has("direction_id") && has("rel_error") {
        Some(vec!["eps", "direction_id", "rel_error"])
    } else {
        None
    }
}

/// Flattens the tables of the given reports into CSVs under `out`.
/// Lipschitz pair tables gain a `displacement` column, the product of the
/// data size and the ratio.
pub fn emit_plot_data(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for input in inputs {
        let text = fs::read_to_string(input)
            .map_err(|e| Error::Invalid(format!("{}: {e}", input.display())))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", input.display())))?;
        let (Some(tag), Some(exp), Some(tables)) =
            (v["tag"].as_str(), v["experiment"].as_str(), v["tables"].as_object())
        else {
            return Err(Error::Invalid(format!("{}: not a report file", input.display())));
        };
        for (name, table) in tables {
            let columns: Vec<String> = table["columns"]
                .as_array()
                .map(|c| c.iter().filter_map(|x| x.as_str().map(String::from)).collect())
                .unwrap_or_default();
            let rows = table["rows"].as_array().cloned().unwrap_or_default();
            let keep: Vec<usize> = match plot_columns(&columns) {
                Some(want) => want.iter().filter_map(|w| columns.iter().position(|c| c == w)).collect(),
                None => (0..columns.len()).collect(),
            };
            let displacement = match (columns.iter().position(|c| c == "dy0_h1"), columns.iter().position(|c| c == "ratio")) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            };
            let mut csv: Vec<String> = keep.iter().map(|&i| columns[i].clone()).collect();
            if displacement.is_some() {
                csv.push("displacement".into());
            }
            let mut body = csv.join(",") + "\n";
            for row in &rows {
                let row = row.as_array().cloned().unwrap_or_default();
                let mut cells: Vec<String> = keep.iter().map(|&i| row.get(i).map_or("NaN".into(), cell)).collect();
                if let Some((a, b)) = displacement {
                    let d = row.get(a).and_then(|x| x.as_f64()).unwrap_or(f64::NAN)
                        * row.get(b).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
                    cells.push(format!("{d:e}"));
                }
                body.push_str(&cells.join(","));
                body.push('\n');
            }
            let p = out.join(format!("{tag}.{exp}.{name}.csv"));
            fs::write(&p, body)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn run(cli: Cli) -> i32 {
    let exp = match &cli.command {
        Command::Solve(a) => (Experiment::Solve, a),
        Command::Stabilize(a) => (Experiment::Stabilize, a),
        Command::GradCheck(a) => (Experiment::GradCheck, a),
        Command::HjbScan(a) => (Experiment::HjbScan, a),
        Command::Lipschitz(a) => (Experiment::Lipschitz, a),
        Command::SecondOrder(a) => (Experiment::SecondOrder, a),
        Command::FeedbackSim(a) => (Experiment::FeedbackSim, a),
        Command::Oracle(a) => (Experiment::Oracle, a),
        Command::All(a) => (Experiment::All, a),
        Command::Validate(a) => return validate(a),
        Command::EmitPlotData(a) => {
            return match emit_plot_data(&a.inputs, &a.out) {
                Ok(paths) => {
                    for p in paths {
                        eprintln!("wrote {}", p.display());
                    }
                    EXIT_PASS
                }
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_ERROR
                }
            };
        }
    };
    run_args(exp.1, exp.0)
}
