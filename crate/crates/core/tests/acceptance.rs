//! End-to-end acceptance checks. Each criterion prints one line
//! `criterion N [PASS|FAIL] ...`; the binary exits nonzero when any fails.
//!
//! Timed criteria run inside a one-thread rayon pool.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use parastab::adjoint::backward_linear;
use parastab::cli::{persist, run_experiment, Experiment};
use parastab::config::ExperimentConfig;
use parastab::forward::{solve_linearized, solve_state, ControlTrajectory};
use parastab::mesh::{BoundaryCondition, SpatialMesh};
use parastab::model::{Actuator, AdmissibleSet, ControlOperator, Nonlinearity, ProblemSpec, Tolerances};
use parastab::optimize::solve_ocp;
use parastab::stabilize::{closed_loop_trials, gain_for_spec, riccati_gain, smallness_estimates, solve_care};
use parastab::verify::{inactivity_time, lipschitz_probe, value_gradient, ExperimentReport, LipschitzOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: u32,
    passed: bool,
    detail: String,
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config parses")
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> (T, Duration) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let out = pool.install(f);
    (out, start.elapsed())
}

fn verdict(report: &ExperimentReport, name: &str) -> Option<(bool, f64)> {
    report.verdicts.iter().find(|v| v.name == name).map(|v| (v.passed, v.value))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn gradient_identity() -> Line {
    let cfg = load("schlogl_1d.json");
    let spec = cfg.to_spec().unwrap();
    let base = solve_ocp(&spec, None).unwrap();
    let eta = spec.admissible().eta();
    let early = spec.steps() / 10;
    let active = base.active_points(eta)[..early].iter().filter(|a| **a).count() as f64 / early as f64;

    let (outcome, elapsed) = single_threaded(|| run_experiment(&cfg, Experiment::GradCheck));
    let report = &outcome.report;
    let fd = &report.tables["fd"];
    let dirs = cfg.experiment.grad_check.random_directions;
    let mut worst_fine: f64 = 0.0;
    let mut ratios = Vec::new();
    for d in 0..dirs {
        let rows: Vec<&Vec<f64>> = fd.rows.iter().filter(|r| r[1] == d as f64).collect();
        let coarse = rows.iter().find(|r| r[0] == 1e-2).map(|r| r[4]);
        let fine = rows.iter().find(|r| r[0] == 1e-3).map(|r| r[4]);
        if let (Some(c), Some(f)) = (coarse, fine) {
            worst_fine = worst_fine.max(f);
            ratios.push(c / f);
        }
    }
    let complete = ratios.len() == dirs && dirs == 3;
    let passed = complete
        && active >= 0.2
        && worst_fine <= 1e-3
        && ratios.iter().all(|r| (50.0..=200.0).contains(r))
        && elapsed <= Duration::from_secs(120);
    Line {
        id: 1,
        passed,
        detail: format!(
            "gradient identity: early activity {:.0}%, max rel error at 1e-3 {:.2e}, ratios {:?}, {:.1}s",
            100.0 * active,
            worst_fine,
            ratios.iter().map(|r| format!("{r:.0}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    }
}

fn lqr_spec() -> ProblemSpec {
    let mesh = SpatialMesh::unit(1, 24, BoundaryCondition::Neumann).unwrap();
    let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)]).unwrap();
    let y0 = mesh.sample(|p| 0.4 + 0.3 * (std::f64::consts::PI * p[0]).cos());
    ProblemSpec::builder(mesh)
        .shift(1.0)
        .nonlinearity(Nonlinearity::Zero)
        .control(b)
        .alpha(0.1)
        .admissible(AdmissibleSet::unconstrained())
        .horizon(10.0, 2e-3)
        .y0(y0)
        .tolerances(Tolerances { optimizer: 1e-10, ..Tolerances::default() })
        .build()
        .unwrap()
}

fn lqr_exactness() -> Line {
    let spec = lqr_spec();
    let mesh = spec.mesh();
    let gain = riccati_gain(spec.operator(), spec.control(), spec.alpha()).unwrap();

    // independent residual of the CARE in nodal coordinates: with W the
    // lumped mass, A^T W P + P W A - (1/alpha) P W B B^T W P + W = 0 for the
    // L2-self-adjoint P returned by `riccati_apply`
    let n = spec.node_count();
    let w = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(mesh.weights()));
    let a = spec.operator().to_dense();
    let mut p = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        p.set_column(j, &nalgebra::DVector::from_vec(gain.riccati_apply(&e).unwrap()));
    }
    let bcol = nalgebra::DVector::from_column_slice(&spec.control().columns()[0]);
    let wp = &w * &p;
    let wb = &w * &bcol;
    let pwb = p.transpose() * &wb;
    let residual = a.transpose() * &wp + wp.transpose() * &a - &pwb * pwb.transpose() * (1.0 / spec.alpha())
        + &w;
    let care_ok = residual.norm() <= 1e-8 * (w.norm() + (a.transpose() * &wp).norm());

    let y0 = spec.y0();
    let riccati_value = gain.quadratic_value(y0).unwrap();
    let vg = value_gradient(&spec).unwrap();
    let py0 = gain.riccati_apply(y0).unwrap();
    let diff: Vec<f64> = vg.l2.iter().zip(&py0).map(|(a, b)| a - b).collect();
    let grad_gap = mesh.norm_l2(&diff) / mesh.norm_l2(&py0);
    let value_gap = rel(vg.value, riccati_value);
    Line {
        id: 2,
        passed: care_ok && vg.result.converged && value_gap <= 0.02 && grad_gap <= 0.02,
        detail: format!(
            "LQR exactness: value gap {value_gap:.2e}, gradient gap {grad_gap:.2e}, CARE residual {:.1e}",
            residual.norm()
        ),
    }
}

fn oracle_equivalence() -> Line {
    let cfg = load("tiny.json");
    let spec = cfg.to_spec().unwrap();
    let (outcome, elapsed) = single_threaded(|| run_experiment(&cfg, Experiment::Oracle));
    let table = &outcome.report.tables["instances"];
    let random = table.rows.len().saturating_sub(1);
    let worst = table.rows.iter().map(|r| r[4]).fold(0.0, f64::max);
    let shape = spec.node_count() == 8 && spec.steps() == 20 && spec.actuator_count() == 1;
    Line {
        id: 3,
        passed: shape && random >= 10 && worst <= 1e-4 && outcome.error.is_none() && elapsed <= Duration::from_secs(60),
        detail: format!(
            "oracle equivalence: {random} random data, max rel gap {worst:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn hjb_residual() -> Line {
    let cfg = load("schlogl_1d.json");
    let (outcome, elapsed) = single_threaded(|| run_experiment(&cfg, Experiment::HjbScan));
    let r = &outcome.report;
    let (ok, worst) = verdict(r, "max_normalized_residual").unwrap_or((false, f64::NAN));
    let (zero_ok, zero) = verdict(r, "zero_state_residual").unwrap_or((false, f64::NAN));
    let states = r.metrics.get("states_used").copied().unwrap_or(0.0);
    Line {
        id: 4,
        passed: ok && zero_ok && zero <= 1e-12 && states >= 10.0 && elapsed <= Duration::from_secs(300),
        detail: format!(
            "HJB residual: max normalized {worst:.2e} <= {:.0e} over {states} states, at zero {zero:.1e}, {:.1}s",
            5.0 * cfg.solver.tol,
            elapsed.as_secs_f64()
        ),
    }
}

fn feedback_law() -> Line {
    let cfg = load("schlogl_1d.json");
    let outcome = run_experiment(&cfg, Experiment::FeedbackSim);
    let r = &outcome.report;
    let (cert_ok, cert) = verdict(r, "certificate.fixed_point").unwrap_or((false, f64::NAN));
    let gap = r.metrics.get("relative_gap").copied().unwrap_or(f64::NAN);
    Line {
        id: 5,
        passed: cert_ok && cert <= 10.0 * cfg.solver.tol && gap <= 0.05,
        detail: format!("feedback law: certificate {cert:.2e} <= {:.0e}, MPC gap {gap:.2e}", 10.0 * cfg.solver.tol),
    }
}

fn lipschitz_stability() -> Line {
    let cfg = load("schlogl_1d.json");
    let outcome = run_experiment(&cfg, Experiment::Lipschitz);
    let r = &outcome.report;
    let (spread_ok, spread) = verdict(r, "mu_spread").unwrap_or((false, f64::NAN));
    let finite = verdict(r, "mu_finite").map_or(false, |v| v.0);
    let pairs = r.tables["pairs"].rows.len();

    // F = 0, no constraint: the data-to-solution map is linear
    let spec = cfg.to_spec().unwrap();
    let linear = ProblemSpec::builder(spec.mesh().clone())
        .shift(spec.base_shift())
        .nonlinearity(Nonlinearity::Zero)
        .control(spec.control().clone())
        .alpha(spec.alpha())
        .admissible(AdmissibleSet::unconstrained())
        .horizon(spec.horizon(), spec.dt())
        .y0(spec.y0().clone())
        .build()
        .unwrap();
    let base = solve_ocp(&linear, None).unwrap();
    let opts = LipschitzOptions { pairs: 8, seed: cfg.seed, ..LipschitzOptions::default() };
    let lin = lipschitz_probe(&linear, &base, &opts).unwrap();
    let lin_spread = lin.metrics.get("mu_max").copied().unwrap_or(f64::NAN)
        / lin.metrics.iter().filter(|(k, _)| k.starts_with("mu.eps")).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    Line {
        id: 6,
        passed: spread_ok && finite && pairs == 16 && lin_spread <= 1.01,
        detail: format!("Lipschitz stability: spread {spread:.3} over {pairs} probes, linear case spread {lin_spread:.6}"),
    }
}

fn second_order() -> Line {
    let cfg = load("schlogl_1d.json");
    let spec = cfg.to_spec().unwrap();
    let h1 = spec.mesh().norm_h1(spec.y0());
    let outcome = run_experiment(&cfg, Experiment::SecondOrder);
    let r = &outcome.report;
    let (kappa_ok, kappa) = verdict(r, "kappa").unwrap_or((false, f64::NAN));
    let (sym_ok, sym) = verdict(r, "symmetry_defect").unwrap_or((false, f64::NAN));
    let fd = &r.tables["hessian_fd"].rows;
    let (coarse, fine) = (fd[0][1], fd[1][1]);
    // either second order with a visible ratio, or exact up to rounding
    let fd_ok = if coarse > 1e-9 { (50.0..=200.0).contains(&(coarse / fine)) } else { fine <= 1e-9 };
    Line {
        id: 7,
        passed: (h1 - 0.05).abs() <= 1e-12 && kappa_ok && kappa > 0.0 && sym_ok && sym <= 1e-8 && fd_ok,
        detail: format!("second order: kappa {kappa:.3e}, symmetry {sym:.1e}, Hv differences {coarse:.1e}/{fine:.1e}"),
    }
}

fn constraint_inactivity() -> Line {
    let mut shipped: Vec<PathBuf> = std::fs::read_dir(config_path(""))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    shipped.sort();
    let mut parts = Vec::new();
    let mut passed = true;
    for path in &shipped {
        let cfg = ExperimentConfig::load(path).unwrap();
        let spec = cfg.to_spec().unwrap();
        let r = solve_ocp(&spec, None).unwrap();
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        if !r.converged {
            parts.push(format!("{name}: not converged"));
            continue;
        }
        let ok = match inactivity_time(&r, &spec) {
            Some(t) if t < spec.horizon() => {
                let k = (t / spec.dt()).round() as usize;
                let eta = spec.admissible().eta();
                let clean = !eta.is_finite() || !r.active_points(eta)[k..].iter().any(|a| *a);
                parts.push(format!("{name} {t:.2}"));
                clean
            }
            other => {
                parts.push(format!("{name} {other:?}"));
                false
            }
        };
        passed &= ok;
    }
    Line { id: 8, passed, detail: format!("constraint inactivity: T-hat per instance [{}]", parts.join(", ")) }
}

fn scalar_care(a: f64, b: f64, alpha: f64) -> f64 {
    let m = |v| DMatrix::from_element(1, 1, v);
    solve_care(&m(a), &m(b), &m(1.0), alpha).unwrap().p[(0, 0)]
}

fn stabilization() -> Line {
    let cfg = load("schlogl_1d.json");
    let spec = cfg.to_spec().unwrap();
    let gain = gain_for_spec(&spec, cfg.experiment.stabilize.dense_cap).unwrap();
    let small = smallness_estimates(&spec, &gain, cfg.experiment.stabilize.samples, cfg.seed).unwrap();
    let delta1 = small.delta1.unwrap();
    let trials = closed_loop_trials(&spec, &gain, delta1, 20, cfg.seed).unwrap();
    let ok = trials.iter().filter(|t| t.tail_passed && t.feasible && t.y0_h1 <= delta1 * (1.0 + 1e-12)).count();

    // 2aP - P^2 b^2/alpha + 1 = 0: a = 0, b = alpha = 1 gives P = 1;
    // b = 0, a = -1 gives P = 1/2
    let p1 = scalar_care(0.0, 1.0, 1.0);
    let p2 = scalar_care(-1.0, 0.0, 1.0);
    let closed = (p1 - 1.0).abs() <= 1e-10 && (p2 - 0.5).abs() <= 1e-10;
    Line {
        id: 9,
        passed: ok == 20 && closed,
        detail: format!("stabilization: {ok}/20 trials at delta1 {delta1:.2e}, scalar P {p1:.12} and {p2:.12}"),
    }
}

fn duality_and_determinism() -> Line {
    let cfg = load("schlogl_1d.json");
    let spec = cfg.to_spec().unwrap();
    let n = spec.node_count();
    let zeros = ControlTrajectory::zeros(spec.dt(), spec.steps(), spec.actuator_count());
    let ybar = solve_state(&spec, &zeros).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut noise = || -> Vec<Vec<f64>> { (0..spec.steps()).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
    let r = noise();
    let q = noise();
    let v = solve_linearized(&spec, &ybar, &vec![0.0; n], None, Some(&r)).unwrap();
    let z = backward_linear(&spec, Some(&ybar), &q, None).unwrap();
    let mesh = spec.mesh();
    let lhs: f64 = (1..=spec.steps()).map(|k| spec.dt() * mesh.dot(v.state(k), &q[k - 1])).sum();
    let rhs: f64 = (1..=spec.steps()).map(|k| spec.dt() * mesh.dot(&r[k - 1], z.state(k - 1))).sum();
    let transpose = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());

    let tiny = load("tiny.json");
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let outcome = run_experiment(&tiny, Experiment::All);
        persist(d.path(), Experiment::All, &outcome).unwrap();
    }
    let listing = |p: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|f| (f.file_name().unwrap().to_string_lossy().to_string(), std::fs::read(&f).unwrap()))
            .collect();
        files.sort();
        files
    };
    let (a, b) = (listing(dirs[0].path()), listing(dirs[1].path()));
    let identical = !a.is_empty() && a == b;
    Line {
        id: 10,
        passed: transpose <= 1e-8 && identical,
        detail: format!("duality and determinism: transpose defect {transpose:.1e}, {} report files identical: {identical}", a.len()),
    }
}

fn main() {
    let criteria: [fn() -> Line; 10] = [
        gradient_identity,
        lqr_exactness,
        oracle_equivalence,
        hjb_residual,
        feedback_law,
        lipschitz_stability,
        second_order,
        constraint_inactivity,
        stabilization,
        duality_and_determinism,
    ];
    let mut failed = Vec::new();
    for c in criteria {
        let line = c();
        println!("criterion {:>2} [{}] {}", line.id, if line.passed { "PASS" } else { "FAIL" }, line.detail);
        if !line.passed {
            failed.push(line.id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
