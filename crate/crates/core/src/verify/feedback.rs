//! The feedback law `u = P(-B^*V'(y)/alpha)`: receding-horizon closed loop,
//! pointwise fixed-point certificate, and the constraint-inactivity time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentReport, Table, Verdict};
use crate::adjoint::adjoint_decay_check;
use crate::error::Result;
use crate::forward::{tail_check, ControlTrajectory, TailReport, Trajectory};
use crate::mesh::Field;
use crate::model::{euclid, ProblemSpec};
use crate::optimize::{cost, solve_ocp, solve_ocp_with_tol, OptimalityResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub closed_loop_cost: f64,
    pub open_loop_cost: f64,
    pub relative_gap: f64,
    pub resolves: usize,
    pub tail: TailReport,
    /// Time at which a re-solve failed; the trajectory stops there.
    pub failed_at: Option<f64>,
    pub trajectory: Trajectory,
    pub controls: ControlTrajectory,
}

/// Receding-horizon realization of the feedback law: every `resolve_every`
/// steps the full-horizon problem is re-solved from the current state and
/// its first controls are applied.
pub fn feedback_closed_loop(spec: &ProblemSpec, base: &OptimalityResult, resolve_every: usize) -> Result<FeedbackReport> {
    let n = spec.steps();
    let window = resolve_every.clamp(1, n);
    let dt = spec.dt();
    let mut states = vec![spec.y0().to_vec()];
    let mut controls: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut plan = base.clone();
    let mut resolves = 1;
    let mut failed_at = None;
    let mut k = 0;
    while k < n {
        if k > 0 {
            let s = spec.with_y0(Field::new(states[k].clone()))?;
            let mut warm: Vec<Vec<f64>> = plan.ubar.values()[window..].to_vec();
            warm.resize(n, vec![0.0; spec.actuator_count()]);
            match solve_ocp(&s, Some(ControlTrajectory::new(dt, warm))) {
                Ok(r) if r.converged => plan = r,
                _ => {
                    failed_at = Some(k as f64 * dt);
                    break;
                }
            }
            resolves += 1;
        }
        let w = window.min(n - k);
        controls.extend_from_slice(&plan.ubar.values()[..w]);
        states.extend_from_slice(&plan.ybar.states()[1..=w]);
        k += w;
    }
    let trajectory = Trajectory::new(dt, states);
    let controls = ControlTrajectory::new(dt, controls);
    let closed_loop_cost = if failed_at.is_none() { cost(spec, &trajectory, &controls) } else { f64::NAN };
    let tail = tail_check(spec.mesh(), &trajectory, spec.tolerances().tail);
    Ok(FeedbackReport {
        closed_loop_cost,
        open_loop_cost: base.cost,
        relative_gap: (closed_loop_cost - base.cost).abs() / base.cost.abs().max(f64::MIN_POSITIVE),
        resolves,
        tail,
        failed_at,
        trajectory,
        controls,
    })
}

/// `max_k |u_k - P(B^* p(0; ybar_k) / alpha)|` over `samples` grid times in
/// `[0, T/2]`, each with a fresh solve from `ybar_k` over the remaining
/// horizon.
pub fn fixed_point_certificate(spec: &ProblemSpec, base: &OptimalityResult, samples: usize) -> Result<ExperimentReport> {
    let n = spec.steps();
    let tol = spec.tolerances().optimizer;
    let mut report = ExperimentReport::new("fixed-point", spec);
    let ks: Vec<usize> = (0..samples.max(1)).map(|i| i * (n / 2) / samples.max(1)).collect();
    let rows: Vec<Result<(usize, f64)>> = ks
        .par_iter()
        .map(|&k| {
            let s = spec.with_steps(n - k).with_y0(Field::new(base.ybar.state(k).to_vec()))?;
            let r = solve_ocp_with_tol(&s, None, tol * 0.1)?;
            let bp = s.control().adjoint(s.mesh(), r.pbar.state(0));
            let target = s.admissible().project(&bp.iter().map(|v| v / s.alpha()).collect::<Vec<_>>());
            let d: Vec<f64> = base.ubar.value(k).iter().zip(&target).map(|(a, b)| a - b).collect();
            Ok((k, euclid(&d)))
        })
        .collect();
    let mut table = Table::new(&["t", "defect"]);
    let mut worst: f64 = 0.0;
    for row in rows {
        let (k, d) = row?;
        worst = worst.max(d);
        table.push(vec![k as f64 * spec.dt(), d]);
    }
    report.metric("max_defect", worst);
    report.metric("base_fixed_point", base.fixed_point);
    report.verdict(Verdict::at_most("fixed_point", worst, 10.0 * tol));
    report.tables.insert("certificate".into(), table);
    Ok(report)
}

/// Smallest grid time after which `|B^* pbar(t)/alpha| <= 3 eta / 4`; `None`
/// when that never happens before `T` or the adjoint does not decay.
pub fn inactivity_time(result: &OptimalityResult, spec: &ProblemSpec) -> Option<f64> {
    let mesh = spec.mesh();
    if adjoint_decay_check(mesh, &result.pbar).flagged {
        return None;
    }
    let eta = spec.admissible().eta();
    if !eta.is_finite() {
        return Some(0.0);
    }
    let last_large = (0..spec.steps()).rev().find(|&k| {
        let bp = spec.control().adjoint(mesh, result.pbar.state(k));
        euclid(&bp) / spec.alpha() > 0.75 * eta
    });
    let t_hat = last_large.map_or(0.0, |k| (k + 1) as f64 * spec.dt());
    (t_hat < spec.horizon()).then_some(t_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryCondition, SpatialMesh};
    use crate::model::{AdmissibleSet, Nonlinearity, Tolerances};

    fn spec(y_scale: f64, eta: f64) -> ProblemSpec {
        let mesh = SpatialMesh::unit(1, 12, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| y_scale * (1.0 + 0.5 * (std::f64::consts::PI * p[0]).cos()));
        let set = if eta.is_finite() { AdmissibleSet::new(eta).unwrap() } else { AdmissibleSet::unconstrained() };
        ProblemSpec::builder(mesh)
            .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
            .alpha(0.1)
            .admissible(set)
            .horizon(4.0, 0.02)
            .y0(y0)
            .tolerances(Tolerances { optimizer: 1e-9, ..Tolerances::default() })
            .build()
            .unwrap()
    }

    #[test]
    fn zero_state_stays_at_rest() {
        let s = spec(0.0, 1.0);
        let base = solve_ocp(&s, None).unwrap();
        let r = feedback_closed_loop(&s, &base, 10).unwrap();
        assert!(r.trajectory.is_zero());
        assert_eq!(r.closed_loop_cost, 0.0);
    }

    #[test]
    fn single_window_reproduces_open_loop() {
        let s = spec(0.1, 0.5);
        let base = solve_ocp(&s, None).unwrap();
        let r = feedback_closed_loop(&s, &base, s.steps()).unwrap();
        assert_eq!(r.controls, base.ubar);
        assert_eq!(r.closed_loop_cost, base.cost);
        assert_eq!(r.resolves, 1);
    }

    #[test]
    fn receding_horizon_cost_is_close_to_open_loop() {
        let s = spec(0.1, 0.5);
        let base = solve_ocp(&s, None).unwrap();
        let r = feedback_closed_loop(&s, &base, s.steps() / 10).unwrap();
        assert!(r.failed_at.is_none());
        assert!(r.relative_gap < 0.05, "{}", r.relative_gap);
        assert!(r.tail.passed);
    }

    #[test]
    fn inactivity_times() {
        let s = spec(0.1, f64::INFINITY);
        let r = solve_ocp(&s, None).unwrap();
        assert_eq!(inactivity_time(&r, &s), Some(0.0));

        let s = spec(0.1, 0.3);
        let r = solve_ocp(&s, None).unwrap();
        assert!(r.active_fraction > 0.0);
        let t = inactivity_time(&r, &s).unwrap();
        assert!(t > 0.0 && t < s.horizon());
        let after = (t / s.dt()).round() as usize;
        assert!(r.active_points(0.3)[after..].iter().all(|a| !a));
    }

    #[test]
    fn certificate_on_small_instance() {
        let s = spec(0.1, 0.3);
        let base = solve_ocp(&s, None).unwrap();
        let rep = fixed_point_certificate(&s, &base, 4).unwrap();
        assert!(rep.passed(), "{}", rep.summary());
    }
}
