//! Independent checks of optimal values on tiny instances.
//!
//! The brute-force oracle shares only the problem data with the solver: it
//! assembles dense matrices, differentiates by forward sensitivities instead
//! of adjoints, and runs a backtracking projected gradient on the stacked
//! control vector.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentReport, Table, Verdict};
use crate::error::{Error, Result};
use crate::forward::{solve_state, ControlTrajectory};
use crate::model::ProblemSpec;
use crate::optimize::{cost, OptimalityResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub controls: ControlTrajectory,
    /// Final value of every restart, in order.
    pub restarts: Vec<f64>,
    pub iterations: usize,
}

struct Dense {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w: DVector<f64>,
    y0: DVector<f64>,
    dt: f64,
    alpha: f64,
    eta: f64,
    steps: usize,
    m: usize,
}

impl Dense {
    fn eval(&self, spec: &ProblemSpec, u: &DVector<f64>, want_gradient: bool) -> Result<(f64, DVector<f64>)> {
        let n = self.y0.len();
        let nl = spec.nonlinearity();
        let dim = self.steps * self.m;
        let eye = DMatrix::<f64>::identity(n, n);
        let mut y = self.y0.clone();
        let mut sens = DMatrix::<f64>::zeros(n, if want_gradient { dim } else { 0 });
        let mut j = 0.5 * self.alpha * self.dt * u.norm_squared();
        let mut grad = u * (self.alpha * self.dt);
        for k in 0..self.steps {
            let uk = u.rows(k * self.m, self.m);
            let rhs = &y + &self.b * uk * self.dt;
            let mut z = y.clone();
            for it in 0.. {
                let f = DVector::from_iterator(n, z.iter().map(|v| nl.eval(*v)));
                let df = DVector::from_iterator(n, z.iter().map(|v| nl.derivatives(*v).0));
                let resid = &z - &self.a * &z * self.dt - f * self.dt - &rhs;
                let jac = &eye - &self.a * self.dt - DMatrix::from_diagonal(&df) * self.dt;
                let step = jac.lu().solve(&resid).ok_or(Error::Singular { sigma: 1.0 / self.dt })?;
                z -= &step;
                if step.amax() <= 1e-15 * (1.0 + z.amax()) {
                    break;
                }
                if it > 50 || !z.amax().is_finite() {
                    return Err(Error::Newton { step: k + 1, increment: step.amax() });
                }
            }
            if want_gradient {
                // refresh the Jacobian at the converged point
                let df = DVector::from_iterator(n, z.iter().map(|v| nl.derivatives(*v).0));
                let jac = &eye - &self.a * self.dt - DMatrix::from_diagonal(&df) * self.dt;
                let mut src = sens.clone();
                for i in 0..self.m {
                    let mut col = src.column_mut(k * self.m + i);
                    col += self.b.column(i) * self.dt;
                }
                sens = jac.lu().solve(&src).ok_or(Error::Singular { sigma: 1.0 / self.dt })?;
                let mz = z.component_mul(&self.w);
                grad += sens.transpose() * mz * self.dt;
            }
            j += 0.5 * self.dt * z.dot(&z.component_mul(&self.w));
            y = z;
        }
        Ok((j, grad))
    }

    fn project(&self, u: &mut DVector<f64>) {
        if !self.eta.is_finite() {
            return;
        }
        for k in 0..self.steps {
            let mut block = u.rows_mut(k * self.m, self.m);
            let n = block.norm();
            if n > self.eta {
                block *= self.eta / n;
            }
        }
    }
}

/// Consecutive iterations without a decrease above rounding before a
/// restart stops.
const STALL: usize = 25;

/// Best value of the fully discretized cost found by projected gradient
/// from `restarts + 1` starting controls.
pub fn brute_force_value(spec: &ProblemSpec, restarts: usize, seed: u64) -> Result<OracleResult> {
    let n = spec.node_count();
    let m = spec.actuator_count();
    let steps = spec.steps();
    if m * steps > 64 || n > 16 {
        return Err(Error::Invalid(format!(
            "oracle needs m*N <= 64 and at most 16 nodes, got m*N = {} and {n} nodes",
            m * steps
        )));
    }
    let b = DMatrix::from_fn(n, m, |i, j| spec.control().columns()[j][i]);
    let d = Dense {
        a: spec.operator().to_dense(),
        b,
        w: DVector::from_column_slice(spec.mesh().weights()),
        y0: DVector::from_column_slice(spec.y0()),
        dt: spec.dt(),
        alpha: spec.alpha(),
        eta: spec.admissible().eta(),
        steps,
        m,
    };
    let dim = m * steps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut log = Vec::new();
    let mut total_iterations = 0;
    for r in 0..=restarts {
        let mut u = if r == 0 {
            DVector::zeros(dim)
        } else {
            let radius = if d.eta.is_finite() { d.eta } else { 1.0 };
            DVector::from_fn(dim, |_, _| rng.gen_range(-1.5..1.5) * radius)
        };
        d.project(&mut u);
        let (mut j, mut g) = d.eval(spec, &u, true)?;
        // curvature scale of the stacked problem, refined by backtracking
        let mut step = 1.0 / (d.alpha * d.dt);
        let mut flat = 0;
        for _ in 0..200_000 {
            total_iterations += 1;
            let mut target = &u - &g / (d.alpha * d.dt);
            d.project(&mut target);
            if (&u - &target).amax() <= 1e-10 {
                break;
            }
            let (next, jn) = loop {
                let mut trial = &u - &g * step;
                d.project(&mut trial);
                let (jt, _) = d.eval(spec, &trial, false)?;
                if jt <= j - 1e-4 * g.dot(&(&u - &trial)) || step < 1e-12 {
                    break (trial, jt);
                }
                step *= 0.5;
            };
            let moved = (&next - &u).amax();
            u = next;
            let (jn2, gn) = d.eval(spec, &u, true)?;
            debug_assert!((jn2 - jn).abs() <= 1e-12 * jn.abs().max(1e-300));
            // a cost that no longer moves above rounding cannot certify a
            // smaller gradient mapping; the value is already exact there
            flat = if j - jn2 <= 8.0 * f64::EPSILON * j.abs() { flat + 1 } else { 0 };
            j = jn2;
            g = gn;
            if moved == 0.0 || flat >= STALL {
                break;
            }
            step *= 1.5;
        }
        log.push(j);
        if best.as_ref().map_or(true, |(bj, _)| j < *bj) {
            best = Some((j, u.clone()));
        }
    }
    let (value, u) = best.expect("at least one start");
    let controls = ControlTrajectory::new(spec.dt(), (0..steps).map(|k| u.rows(k * m, m).iter().copied().collect()).collect());
    Ok(OracleResult { value, controls, restarts: log, iterations: total_iterations })
}

/// The optimal value is below the cost of `count` feasible controls near the
/// optimum: `P(ubar + v_i)` for smooth random `v_i` of growing size.
pub fn dp_consistency(spec: &ProblemSpec, base: &OptimalityResult, count: usize, seed: u64) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("dp-consistency", spec);
    report.provenance.seed = Some(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = spec.admissible().eta();
    let radius = if eta.is_finite() { eta } else { base.ubar.max_norm().max(1.0) };
    let mut table = Table::new(&["probe_id", "size", "cost"]);
    let mut worst_gap = f64::INFINITY;
    let mut evaluated = 0;
    for i in 0..count {
        // a few sinusoids in time, independently per actuator
        let size = radius * (i + 1) as f64 / count as f64;
        let waves: Vec<Vec<(f64, f64)>> = (0..spec.actuator_count())
            .map(|_| (0..3).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect())
            .collect();
        let values = (0..spec.steps())
            .map(|k| {
                let t = k as f64 / spec.steps() as f64;
                base.ubar
                    .value(k)
                    .iter()
                    .zip(&waves)
                    .map(|(u, w)| {
                        let v: f64 = w
                            .iter()
                            .enumerate()
                            .map(|(j, (a, ph))| a * ((j + 1) as f64 * std::f64::consts::PI * t + ph).sin())
                            .sum();
                        u + size * v / 3.0
                    })
                    .collect()
            })
            .collect();
        let u = ControlTrajectory::new(spec.dt(), values).project(spec.admissible());
        match solve_state(spec, &u) {
            Ok(y) => {
                let c = cost(spec, &y, &u);
                worst_gap = worst_gap.min(c - base.cost);
                evaluated += 1;
                table.push(vec![i as f64, size, c]);
            }
            Err(e) => report.note(format!("probe {i} diverged: {e}")),
        }
    }
    report.metric("value", base.cost);
    report.metric("min_probe_gap", worst_gap);
    report.metric("probes_evaluated", evaluated as f64);
    report.verdict(Verdict::holds("probes_evaluated", evaluated > 0));
    report.verdict(Verdict::at_least("min_probe_gap", worst_gap, 0.0));
    report.tables.insert("probes".into(), table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryCondition, Field, SpatialMesh};
    use crate::model::{AdmissibleSet, Nonlinearity, Tolerances};
    use crate::optimize::solve_ocp;

    fn tiny(nl: Nonlinearity, eta: f64, y0: Field) -> ProblemSpec {
        let mesh = SpatialMesh::unit(1, 8, BoundaryCondition::Neumann).unwrap();
        let set = if eta.is_finite() { AdmissibleSet::new(eta).unwrap() } else { AdmissibleSet::unconstrained() };
        ProblemSpec::builder(mesh)
            .nonlinearity(nl)
            .alpha(0.1)
            .admissible(set)
            .horizon(2.0, 0.1)
            .y0(y0)
            .tolerances(Tolerances { optimizer: 1e-11, ..Tolerances::default() })
            .build()
            .unwrap()
    }

    #[test]
    fn zero_datum_value_is_zero() {
        let s = tiny(Nonlinearity::Zero, 1.0, Field::zeros(8));
        assert_eq!(brute_force_value(&s, 2, 0).unwrap().value, 0.0);
    }

    #[test]
    fn oracle_agrees_with_solver() {
        let mesh = SpatialMesh::unit(1, 8, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| 0.3 + 0.2 * (std::f64::consts::PI * p[0]).cos());
        for (nl, eta) in [(Nonlinearity::Zero, f64::INFINITY), (Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 }, 0.5)] {
            let s = tiny(nl, eta, y0.clone());
            let o = brute_force_value(&s, 3, 7).unwrap();
            let r = solve_ocp(&s, None).unwrap();
            assert!(r.converged);
            assert!((o.value - r.cost).abs() <= 1e-6 * r.cost, "{} vs {}", o.value, r.cost);
        }
    }

    #[test]
    fn random_feasible_controls_cost_more() {
        let mesh = SpatialMesh::unit(1, 8, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| 0.3 + 0.2 * (std::f64::consts::PI * p[0]).cos());
        let s = tiny(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 }, 0.5, y0);
        let r = solve_ocp(&s, None).unwrap();
        let rep = dp_consistency(&s, &r, 5, 3).unwrap();
        assert!(rep.passed(), "{}", rep.summary());
    }

    #[test]
    fn oversized_instances_are_refused() {
        let mesh = SpatialMesh::unit(1, 20, BoundaryCondition::Neumann).unwrap();
        let s = ProblemSpec::builder(mesh).horizon(1.0, 0.1).y0(Field::zeros(20)).build().unwrap();
        assert!(brute_force_value(&s, 0, 0).is_err());
    }
}
