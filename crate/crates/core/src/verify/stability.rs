//! Lipschitz stability of the solution map in `y0`, and the reduced Hessian.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentReport, Table, Verdict};
use crate::error::{Error, Result};
use crate::forward::{trajectory_norms, ControlTrajectory};
use crate::mesh::Field;
use crate::model::{euclid, random_smooth_field, ProblemSpec};
use crate::optimize::{solve_ocp_with_tol, Coordinates, OptimalityResult, ReducedHessian};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzOptions {
    pub pairs: usize,
    pub eps: Vec<f64>,
    pub seed: u64,
    pub tol: f64,
    /// Accepted `max mu / min mu` across the step sizes.
    pub max_spread: f64,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        Self { pairs: 8, eps: vec![1e-2, 1e-3], seed: 0, tol: 1e-10, max_spread: 2.0 }
    }
}

/// Ratios `(|dy|_W + |dp|_W + max_t |du|) / |dy0|_{H1}` for data
/// `y0 + eps s v_i`, `s = |y0|_{H1}`, with the same directions at every `eps`.
pub fn lipschitz_probe(spec: &ProblemSpec, base: &OptimalityResult, opts: &LipschitzOptions) -> Result<ExperimentReport> {
    let mesh = spec.mesh();
    let op = spec.operator();
    let mut report = ExperimentReport::new("lipschitz", spec);
    report.provenance.seed = Some(opts.seed);
    let scale = match mesh.norm_h1(spec.y0()) {
        n if n > 0.0 => n,
        _ => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dirs: Vec<Field> = (0..opts.pairs).map(|_| random_smooth_field(mesh, &mut rng, 4)).collect();
    let probes: Vec<(usize, usize)> =
        (0..opts.eps.len()).flat_map(|e| (0..dirs.len()).map(move |d| (e, d))).collect();
    let ratios: Vec<std::result::Result<(f64, f64), String>> = probes
        .par_iter()
        .map(|&(e, d)| {
            let dy0 = dirs[d].scaled(opts.eps[e] * scale);
            let s = spec.with_y0(spec.y0().add_scaled(1.0, &dy0)).map_err(|e| e.to_string())?;
            let r = solve_ocp_with_tol(&s, None, opts.tol).map_err(|e| e.to_string())?;
            if !r.converged {
                return Err(format!("solve stalled at residual {:.3e}", r.residual));
            }
            let dy = trajectory_norms(&r.ybar.difference(&base.ybar), op).w_norm;
            let dp = trajectory_norms(&r.pbar.difference(&base.pbar), op).w_norm;
            let du = r
                .ubar
                .values()
                .iter()
                .zip(base.ubar.values())
                .map(|(a, b)| euclid(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()))
                .fold(0.0, f64::max);
            let h1 = mesh.norm_h1(&dy0);
            Ok((h1, (dy + dp + du) / h1))
        })
        .collect();
    let mut table = Table::new(&["eps", "pair_id", "dy0_h1", "ratio"]);
    let mut mus = Vec::new();
    for (e, eps) in opts.eps.iter().enumerate() {
        let mut mu: f64 = 0.0;
        for d in 0..dirs.len() {
            match &ratios[e * dirs.len() + d] {
                Ok((h1, ratio)) => {
                    mu = mu.max(*ratio);
                    table.push(vec![*eps, d as f64, *h1, *ratio]);
                }
                Err(msg) => report.note(format!("pair {d} at eps {eps:e} dropped: {msg}")),
            }
        }
        report.metric(&format!("mu.eps{e}"), mu);
        mus.push(mu);
    }
    let hi = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
    report.metric("mu_max", hi);
    report.verdict(Verdict::holds("mu_finite", mus.iter().all(|m| m.is_finite() && *m > 0.0)));
    report.verdict(Verdict::holds("all_pairs_solved", ratios.iter().all(|r| r.is_ok())));
    report.verdict(Verdict::at_most("mu_spread", hi / lo, opts.max_spread));
    report.tables.insert("pairs".into(), table);
    Ok(report)
}

/// `H w = alpha w - B^* dp` in control coordinates, with `dy` from the
/// linearized state equation and `dp` from the second-order adjoint.
pub fn hessian_vector(spec: &ProblemSpec, base: &OptimalityResult, w: &ControlTrajectory) -> Result<ControlTrajectory> {
    ReducedHessian::new(spec, base, Coordinates::Control)?.apply(w)
}

fn random_control(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> ControlTrajectory {
    let u = ControlTrajectory::new(
        spec.dt(),
        (0..spec.steps()).map(|_| (0..spec.actuator_count()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
    );
    let n = u.norm();
    u.scaled(1.0 / n)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecondOrderReport {
    /// Smallest Ritz value of the reduced Hessian.
    pub kappa: f64,
    pub ritz: Vec<f64>,
    pub krylov_dim: usize,
    pub restarts: usize,
    pub symmetry_defect: f64,
    /// `(eps, relative error)` of central differences of the reduced gradient.
    pub fd_errors: Vec<(f64, f64)>,
    pub fd_ratio: Option<f64>,
    /// Coordinates the Hessian was taken in; `Feedback` falls back to
    /// `Control` when no stabilizing gain exists or every point is active.
    pub coordinates: Coordinates,
}

impl SecondOrderReport {
    pub fn report(&self, spec: &ProblemSpec) -> ExperimentReport {
        let mut r = ExperimentReport::new("second-order", spec);
        r.metric("kappa", self.kappa);
        r.metric("ritz_max", self.ritz.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        r.metric("krylov_dim", self.krylov_dim as f64);
        r.metric("restarts", self.restarts as f64);
        r.verdict(Verdict::greater("kappa", self.kappa, 0.0));
        r.verdict(Verdict::at_most("symmetry_defect", self.symmetry_defect, 1e-8));
        let mut t = Table::new(&["eps", "rel_error"]);
        for (e, err) in &self.fd_errors {
            t.push(vec![*e, *err]);
        }
        r.tables.insert("hessian_fd".into(), t);
        match self.fd_ratio {
            Some(q) => r.verdict(Verdict::within("hessian_fd_ratio", q, 50.0, 200.0)),
            None => r.note("Hessian differences are exact up to rounding; no ratio judged"),
        }
        r
    }
}

const MAX_RESTARTS: usize = 3;

fn lanczos(spec: &ProblemSpec, h: &ReducedHessian, dim: usize, rng: &mut ChaCha8Rng) -> Result<Option<Vec<f64>>> {
    let mut basis: Vec<ControlTrajectory> = vec![random_control(spec, rng)];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut scale: f64 = 0.0;
    for j in 0..dim {
        let q = &basis[j];
        let mut w = h.apply(q)?;
        let a = w.inner(q);
        alphas.push(a);
        scale = scale.max(a.abs());
        for _ in 0..2 {
            for b in &basis {
                let c = w.inner(b);
                w = w.add_scaled(-c, b);
            }
        }
        if j + 1 == dim {
            break;
        }
        let beta = w.norm();
        if !beta.is_finite() {
            return Ok(None);
        }
        if beta <= 1e-12 * scale.max(spec.alpha()) {
            // invariant subspace: exact Ritz values, unless nothing was built
            if j < 1 {
                return Ok(None);
            }
            break;
        }
        betas.push(beta);
        basis.push(w.scaled(1.0 / beta));
    }
    let k = alphas.len();
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alphas[i]
        } else if i + 1 == j || j + 1 == i {
            betas[i.min(j)]
        } else {
            0.0
        }
    });
    let mut ritz: Vec<f64> = SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
    ritz.sort_by(|a, b| a.total_cmp(b));
    Ok(Some(ritz))
}

/// Smallest Ritz value of the reduced Hessian at `base`, its symmetry
/// defect, and a central-difference check of Hessian-vector products.
pub fn second_order_check(
    spec: &ProblemSpec,
    base: &OptimalityResult,
    krylov_dim: usize,
    seed: u64,
    coords: Coordinates,
) -> Result<SecondOrderReport> {
    let h = ReducedHessian::new(spec, base, coords)?;
    let dim = krylov_dim.min(spec.steps() * spec.actuator_count()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut restarts = 0;
    let ritz = loop {
        match lanczos(spec, &h, dim, &mut rng)? {
            Some(r) => break r,
            None if restarts < MAX_RESTARTS => restarts += 1,
            None => return Err(Error::LanczosBreakdown { restarts }),
        }
    };

    let w1 = random_control(spec, &mut rng);
    let w2 = random_control(spec, &mut rng);
    let h1 = h.apply(&w1)?;
    let h2 = h.apply(&w2)?;
    let symmetry_defect = (h1.inner(&w2) - w1.inner(&h2)).abs() / (h1.norm() * w2.norm()).max(f64::MIN_POSITIVE);

    let mut fd_errors = Vec::new();
    for eps in [1e-2, 1e-3] {
        let gp = h.gradient(&w1.scaled(eps))?;
        let gm = h.gradient(&w1.scaled(-eps))?;
        let fd = gp.add_scaled(-1.0, &gm).scaled(0.5 / eps);
        fd_errors.push((eps, fd.add_scaled(-1.0, &h1).norm() / h1.norm()));
    }
    let fd_ratio = (fd_errors[0].1 > 1e-9).then(|| fd_errors[0].1 / fd_errors[1].1);
    Ok(SecondOrderReport {
        kappa: ritz[0],
        ritz,
        krylov_dim: dim,
        restarts,
        symmetry_defect,
        fd_errors,
        fd_ratio,
        coordinates: if h.is_feedback() { Coordinates::Feedback } else { Coordinates::Control },
    })
}

/// Smallest Ritz value at several data sizes `|y0|_{H1}` (same shape as
/// `spec.y0()`).
pub fn curvature_trend(
    spec: &ProblemSpec,
    norms: &[f64],
    krylov_dim: usize,
    seed: u64,
    coords: Coordinates,
) -> Result<ExperimentReport> {
    let mesh = spec.mesh();
    let shape = spec.y0().scaled(1.0 / mesh.norm_h1(spec.y0()));
    let mut report = ExperimentReport::new("curvature-trend", spec);
    let mut table = Table::new(&["y0_h1", "kappa"]);
    let kappas: Vec<Result<f64>> = norms
        .par_iter()
        .map(|n| {
            let s = spec.with_y0(shape.scaled(*n))?;
            let base = solve_ocp_with_tol(&s, None, s.tolerances().optimizer)?;
            Ok(second_order_check(&s, &base, krylov_dim, seed, coords)?.kappa)
        })
        .collect();
    let mut values = Vec::new();
    for (n, k) in norms.iter().zip(kappas) {
        let k = k?;
        table.push(vec![*n, k]);
        values.push(k);
    }
    // equal values up to rounding count as non-increasing
    let decreasing = values.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs());
    report.metric("decreasing", if decreasing { 1.0 } else { 0.0 });
    report.verdict(Verdict::holds("kappa_positive", values.iter().all(|k| *k > 0.0)));
    if !decreasing {
        report.note("kappa is not monotone in |y0| on this instance");
    }
    report.tables.insert("trend".into(), table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryCondition, SpatialMesh};
    use crate::model::{Actuator, AdmissibleSet, ControlOperator, Nonlinearity, Tolerances};
    use crate::optimize::solve_ocp;

    fn spec(nl: Nonlinearity, eta: f64, scale: f64) -> ProblemSpec {
        let mesh = SpatialMesh::unit(1, 12, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| scale * (1.0 + 0.5 * (std::f64::consts::PI * p[0]).cos()));
        let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)]).unwrap();
        let set = if eta.is_finite() { AdmissibleSet::new(eta).unwrap() } else { AdmissibleSet::unconstrained() };
        ProblemSpec::builder(mesh)
            .shift(if nl.is_zero() { 1.0 } else { 0.0 })
            .nonlinearity(nl)
            .control(b)
            .alpha(0.1)
            .admissible(set)
            .horizon(4.0, 0.02)
            .y0(y0)
            .tolerances(Tolerances { optimizer: 1e-10, ..Tolerances::default() })
            .build()
            .unwrap()
    }

    #[test]
    fn linear_problem_has_curvature_at_least_alpha() {
        let s = spec(Nonlinearity::Zero, f64::INFINITY, 0.1);
        let base = solve_ocp(&s, None).unwrap();
        let r = second_order_check(&s, &base, 20, 1, Coordinates::Control).unwrap();
        assert!(r.kappa >= 0.1 * (1.0 - 1e-9), "{}", r.kappa);
        assert!(r.symmetry_defect < 1e-10);
        assert!(r.fd_errors.iter().all(|(_, e)| *e < 1e-7), "{:?}", r.fd_errors);
    }

    #[test]
    fn schlogl_hessian_is_symmetric_and_matches_differences() {
        let s = spec(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 }, 0.5, 0.1);
        let base = solve_ocp(&s, None).unwrap();
        for coords in [Coordinates::Control, Coordinates::Feedback] {
            let r = second_order_check(&s, &base, 20, 2, coords).unwrap();
            assert!(r.kappa > 0.0, "{coords:?} {}", r.kappa);
            assert!(r.symmetry_defect < 1e-8);
            let q = r.fd_ratio.expect("nonlinear differences are above rounding");
            assert!((50.0..=200.0).contains(&q), "{coords:?} {q}");
        }
        let r = second_order_check(&s, &base, 20, 2, Coordinates::Feedback).unwrap();
        assert_eq!(r.coordinates, Coordinates::Feedback);
    }

    #[test]
    fn linear_solution_map_has_constant_ratio() {
        let s = spec(Nonlinearity::Zero, f64::INFINITY, 0.1);
        let base = solve_ocp(&s, None).unwrap();
        let opts = LipschitzOptions { pairs: 3, max_spread: 1.01, ..LipschitzOptions::default() };
        let r = lipschitz_probe(&s, &base, &opts).unwrap();
        assert!(r.passed(), "{}", r.summary());
    }
}
