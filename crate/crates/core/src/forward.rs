//! Time integration of `y_t = A y + F(y) + B u` on a uniform grid.
//!
//! Controls are piecewise constant: `u_k` acts on `(t_k, t_{k+1}]`. The
//! default scheme is implicit Euler with the nonlinear step equation solved
//! by Newton's method to near machine precision, so the backward recursion
//! in [`crate::adjoint`] is the exact transpose of the discrete forward map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{EllipticOperator, SpatialMesh};
use crate::model::{euclid, AdmissibleSet, ProblemSpec};

const BLOWUP_FACTOR: f64 = 1e6;
const MAX_NEWTON: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ImplicitEuler,
    CrankNicolson,
}

impl Scheme {
    fn theta(self) -> f64 {
        match self {
            Scheme::ImplicitEuler => 1.0,
            Scheme::CrankNicolson => 0.5,
        }
    }
}

/// Snapshots `y(t_k)`, `t_k = k dt`, `k = 0..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dt: f64,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<Vec<f64>>) -> Self {
        Self { dt, states }
    }

    pub fn zeros(dt: f64, steps: usize, nodes: usize) -> Self {
        Self { dt, states: vec![vec![0.0; nodes]; steps + 1] }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of time steps `N` (one less than the snapshot count).
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one snapshot")
    }

    pub fn into_states(self) -> Vec<Vec<f64>> {
        self.states
    }

    /// Forward differences `(y_{k+1} - y_k) / dt`, `k = 0..N`.
    pub fn time_derivatives(&self) -> Vec<Vec<f64>> {
        self.states
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b) / self.dt).collect())
            .collect()
    }

    pub fn difference(&self, other: &Trajectory) -> Trajectory {
        Trajectory {
            dt: self.dt,
            states: self
                .states
                .iter()
                .zip(&other.states)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.states.iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

/// Piecewise-constant controls `u_k in R^m`, `k = 0..N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory {
    dt: f64,
    values: Vec<Vec<f64>>,
}

impl ControlTrajectory {
    pub fn new(dt: f64, values: Vec<Vec<f64>>) -> Self {
        Self { dt, values }
    }

    pub fn zeros(dt: f64, steps: usize, m: usize) -> Self {
        Self { dt, values: vec![vec![0.0; m]; steps] }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }

    pub fn actuator_count(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn pointwise_norms(&self) -> Vec<f64> {
        self.values.iter().map(|v| euclid(v)).collect()
    }

    /// `max_t |u(t)|`, the `C(I; U)` norm.
    pub fn max_norm(&self) -> f64 {
        self.pointwise_norms().into_iter().fold(0.0, f64::max)
    }

    /// `(u, v)_U = dt sum_k u_k . v_k`
    pub fn inner(&self, other: &ControlTrajectory) -> f64 {
        self.dt
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
                .sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// `self + s * other`
    pub fn add_scaled(&self, s: f64, other: &ControlTrajectory) -> ControlTrajectory {
        ControlTrajectory {
            dt: self.dt,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + s * y).collect())
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> ControlTrajectory {
        ControlTrajectory {
            dt: self.dt,
            values: self.values.iter().map(|a| a.iter().map(|x| s * x).collect()).collect(),
        }
    }

    pub fn project(&self, set: &AdmissibleSet) -> ControlTrajectory {
        ControlTrajectory { dt: self.dt, values: self.values.iter().map(|v| set.project(v)).collect() }
    }

    pub fn is_feasible(&self, set: &AdmissibleSet, slack: f64) -> bool {
        self.values.iter().all(|v| set.contains(v, slack))
    }

    /// Restriction to steps `from..`.
    pub fn tail(&self, from: usize) -> ControlTrajectory {
        ControlTrajectory { dt: self.dt, values: self.values[from..].to_vec() }
    }
}

fn blowup_threshold(mesh: &SpatialMesh, y0: &[f64]) -> f64 {
    BLOWUP_FACTOR * (1.0 + mesh.norm_l2(y0))
}

fn newton_tol(spec: &ProblemSpec) -> f64 {
    if spec.mesh().dimension() == 1 {
        1e-13
    } else {
        (10.0 * spec.tolerances().linear).max(1e-13)
    }
}

/// Solves `y - theta dt (A y + F(y)) = r` by Newton's method from `guess`.
fn implicit_solve(
    spec: &ProblemSpec,
    theta: f64,
    r: &[f64],
    guess: &[f64],
    step: usize,
) -> Result<Vec<f64>> {
    let op = spec.operator();
    let nl = spec.nonlinearity();
    let tdt = theta * spec.dt();
    let sigma = 1.0 / tdt;
    let lin_tol = spec.tolerances().linear;
    if nl.is_zero() {
        let rhs: Vec<f64> = r.iter().map(|v| v / tdt).collect();
        return op.solve_shifted_diag(sigma, None, &rhs, lin_tol);
    }
    let tol = newton_tol(spec);
    let mut y = guess.to_vec();
    let mut ay = vec![0.0; y.len()];
    let mut last = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        op.apply_into(&y, &mut ay);
        // -G(y) / (theta dt)
        let rhs: Vec<f64> = (0..y.len())
            .map(|i| (r[i] - y[i]) / tdt + ay[i] + nl.eval(y[i]))
            .collect();
        let d = nl.derivative_field(&y);
        let delta = op.solve_shifted_diag(sigma, Some(&d), &rhs, lin_tol)?;
        let dmax = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (yi, di) in y.iter_mut().zip(&delta) {
            *yi += di;
        }
        last = dmax;
        if !dmax.is_finite() {
            break;
        }
        if dmax <= tol * (1.0 + ymax) {
            return Ok(y);
        }
    }
    Err(Error::Newton { step, increment: last })
}

/// One implicit-Euler step `y_{k+1}` from `y_k` under the control `u_k`.
/// `step` is `k + 1` and only labels errors.
pub(crate) fn euler_step(spec: &ProblemSpec, prev: &[f64], u: &[f64], step: usize) -> Result<Vec<f64>> {
    let mut r = prev.to_vec();
    spec.control().apply_add(u, spec.dt(), &mut r);
    implicit_solve(spec, 1.0, &r, prev, step)
}

pub(crate) fn check_blowup(spec: &ProblemSpec, y0: &[f64], next: &[f64], step: usize) -> Result<()> {
    let mesh = spec.mesh();
    let threshold = blowup_threshold(mesh, y0);
    let norm = mesh.norm_l2(next);
    if norm <= threshold {
        Ok(())
    } else {
        Err(Error::Divergence { time: step as f64 * spec.dt(), norm, threshold })
    }
}

/// Integrates from `y0` under the controls `u` with the given scheme.
pub fn integrate(
    spec: &ProblemSpec,
    y0: &[f64],
    u: &ControlTrajectory,
    scheme: Scheme,
) -> Result<Trajectory> {
    let mesh = spec.mesh();
    mesh.check(y0)?;
    if u.steps() != spec.steps() {
        return Err(Error::Invalid(format!(
            "control has {} steps, problem has {}",
            u.steps(),
            spec.steps()
        )));
    }
    if u.actuator_count() != spec.actuator_count() {
        return Err(Error::Invalid("control dimension does not match actuator count".into()));
    }
    let theta = scheme.theta();
    let dt = spec.dt();
    let op = spec.operator();
    let nl = spec.nonlinearity();
    let b = spec.control();
    let mut states = Vec::with_capacity(spec.steps() + 1);
    states.push(y0.to_vec());
    let mut ay = vec![0.0; y0.len()];
    for k in 0..spec.steps() {
        let prev = &states[k];
        let next = if theta == 1.0 {
            euler_step(spec, prev, u.value(k), k + 1)?
        } else {
            let mut r = prev.clone();
            op.apply_into(prev, &mut ay);
            for i in 0..r.len() {
                r[i] += (1.0 - theta) * dt * (ay[i] + nl.eval(prev[i]));
            }
            b.apply_add(u.value(k), dt, &mut r);
            implicit_solve(spec, theta, &r, prev, k + 1)?
        };
        check_blowup(spec, y0, &next, k + 1)?;
        states.push(next);
    }
    Ok(Trajectory::new(dt, states))
}

/// State trajectory for `spec.y0()` under `u` (implicit Euler).
pub fn solve_state(spec: &ProblemSpec, u: &ControlTrajectory) -> Result<Trajectory> {
    integrate(spec, spec.y0(), u, Scheme::ImplicitEuler)
}

/// Implicit-Euler linearization around `ybar`:
/// `(I - dt A - dt F'(ybar_k)) v_k = v_{k-1} + dt (B w_{k-1} + r_k)`.
///
/// `source[k-1]` holds `r_k` for `k = 1..=N`.
pub fn solve_linearized(
    spec: &ProblemSpec,
    ybar: &Trajectory,
    v0: &[f64],
    control: Option<&ControlTrajectory>,
    source: Option<&[Vec<f64>]>,
) -> Result<Trajectory> {
    let mesh = spec.mesh();
    mesh.check(v0)?;
    let dt = spec.dt();
    let n = spec.steps();
    let op = spec.operator();
    let nl = spec.nonlinearity();
    let b = spec.control();
    let mut states = Vec::with_capacity(n + 1);
    states.push(v0.to_vec());
    for k in 1..=n {
        let mut rhs: Vec<f64> = states[k - 1].iter().map(|v| v / dt).collect();
        if let Some(w) = control {
            b.apply_add(w.value(k - 1), 1.0, &mut rhs);
        }
        if let Some(src) = source {
            for (r, s) in rhs.iter_mut().zip(&src[k - 1]) {
                *r += s;
            }
        }
        let d = if nl.is_zero() { None } else { Some(nl.derivative_field(ybar.state(k))) };
        states.push(op.solve_shifted_diag(1.0 / dt, d.as_deref(), &rhs, spec.tolerances().linear)?);
    }
    Ok(Trajectory::new(dt, states))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    /// `int ||A_h y||^2`
    pub int_operator_sq: f64,
    /// `int ||y||^2`
    pub int_state_sq: f64,
    /// `int ||y_t||^2` from forward differences.
    pub int_derivative_sq: f64,
    pub w_norm: f64,
    pub sup_h1: f64,
    pub final_h1: f64,
}

fn trapezoid(dt: f64, vals: &[f64]) -> f64 {
    match vals.len() {
        0 | 1 => 0.0,
        n => dt * (vals[1..n - 1].iter().sum::<f64>() + 0.5 * (vals[0] + vals[n - 1])),
    }
}

pub fn trajectory_norms(y: &Trajectory, op: &EllipticOperator) -> NormReport {
    let mesh = op.mesh();
    let dt = y.dt();
    let a_sq: Vec<f64> = y.states().iter().map(|s| mesh.dot(&op.apply(s), &op.apply(s))).collect();
    let y_sq: Vec<f64> = y.states().iter().map(|s| mesh.dot(s, s)).collect();
    let int_operator_sq = trapezoid(dt, &a_sq);
    let int_state_sq = trapezoid(dt, &y_sq);
    let int_derivative_sq: f64 = y.time_derivatives().iter().map(|d| dt * mesh.dot(d, d)).sum();
    let h1: Vec<f64> = y.states().iter().map(|s| mesh.norm_h1(s)).collect();
    NormReport {
        int_operator_sq,
        int_state_sq,
        int_derivative_sq,
        w_norm: (int_operator_sq + int_state_sq + int_derivative_sq).sqrt(),
        sup_h1: h1.iter().copied().fold(0.0, f64::max),
        final_h1: *h1.last().unwrap_or(&0.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub passed: bool,
    pub final_h1: f64,
    pub initial_h1: f64,
    pub threshold: f64,
    /// `||y(T)||_{H1} / ||y(3T/4)||_{H1}`; zero for a vanishing trajectory.
    pub decay_factor: f64,
}

/// Horizon-truncation gate: `||y(T)||_{H1} <= tol (1 + ||y_0||_{H1})`.
pub fn tail_check(mesh: &SpatialMesh, y: &Trajectory, tail_tol: f64) -> TailReport {
    let n = y.steps();
    let final_h1 = mesh.norm_h1(y.last());
    let initial_h1 = mesh.norm_h1(y.state(0));
    let quarter = mesh.norm_h1(y.state(3 * n / 4));
    let threshold = tail_tol * (1.0 + initial_h1);
    TailReport {
        passed: final_h1 <= threshold,
        final_h1,
        initial_h1,
        threshold,
        decay_factor: if quarter > 0.0 { final_h1 / quarter } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryCondition, Field};
    use crate::model::Nonlinearity;
    use std::f64::consts::PI;

    fn heat_spec(n: usize, dt: f64, t: f64) -> ProblemSpec {
        let mesh = crate::mesh::SpatialMesh::unit(1, n, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| (PI * p[0]).cos());
        ProblemSpec::builder(mesh).horizon(t, dt).y0(y0).build().unwrap()
    }

    #[test]
    fn constant_state_is_stationary() {
        let mesh = crate::mesh::SpatialMesh::unit(1, 17, BoundaryCondition::Neumann).unwrap();
        let spec = ProblemSpec::builder(mesh)
            .horizon(1.0, 0.1)
            .y0(Field::constant(17, 0.7))
            .build()
            .unwrap();
        let u = ControlTrajectory::zeros(0.1, spec.steps(), 1);
        let y = solve_state(&spec, &u).unwrap();
        for s in y.states() {
            assert!(s.iter().all(|v| (v - 0.7).abs() < 1e-13));
        }
    }

    #[test]
    fn cosine_mode_decays_like_heat_kernel() {
        let spec = heat_spec(101, 1e-3, 1.0);
        let u = ControlTrajectory::zeros(1e-3, spec.steps(), 1);
        let y = integrate(&spec, spec.y0(), &u, Scheme::CrankNicolson).unwrap();
        let mesh = spec.mesh();
        let ratio = mesh.norm_l2(y.last()) / mesh.norm_l2(y.state(0));
        let exact = (-PI * PI).exp();
        assert!((ratio / exact - 1.0).abs() < 0.01, "ratio {ratio} vs {exact}");

        let norms = trajectory_norms(&y, spec.operator());
        // int_0^1 e^{-2 pi^2 t} dt * ||cos||^2
        let expected = (1.0 - (-2.0 * PI * PI).exp()) / (2.0 * PI * PI) * 0.5;
        assert!((norms.int_state_sq / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_and_kernel_trajectory_norms() {
        let mesh = crate::mesh::SpatialMesh::unit(1, 9, BoundaryCondition::Neumann).unwrap();
        let op = crate::mesh::assemble_operator(&mesh, 0.0);
        let z = Trajectory::zeros(0.1, 10, 9);
        let r = trajectory_norms(&z, &op);
        assert_eq!((r.w_norm, r.sup_h1, r.final_h1), (0.0, 0.0, 0.0));
        let c = Trajectory::new(0.1, vec![vec![2.0; 9]; 11]);
        let r = trajectory_norms(&c, &op);
        assert!(r.int_operator_sq.abs() < 1e-20);
        assert_eq!(r.int_derivative_sq, 0.0);
        assert!(tail_check(&mesh, &z, 1e-3).passed);
    }

    #[test]
    fn unstable_schlogl_grows_at_linear_rate() {
        let mesh = crate::mesh::SpatialMesh::unit(1, 33, BoundaryCondition::Neumann).unwrap();
        let y0 = Field::constant(33, 1e-3);
        let spec = ProblemSpec::builder(mesh.clone())
            .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
            .horizon(1.0, 1e-3)
            .y0(y0)
            .build()
            .unwrap();
        let u = ControlTrajectory::zeros(1e-3, spec.steps(), 1);
        let y = solve_state(&spec, &u).unwrap();
        let rate = (mesh.norm_l2(y.last()) / mesh.norm_l2(y.state(0))).ln();
        assert!((rate - 2.0).abs() < 0.02, "rate {rate}");
        assert!(!tail_check(&mesh, &y, 1e-3).passed);
    }

    #[test]
    fn blowup_is_detected() {
        let mesh = crate::mesh::SpatialMesh::unit(1, 9, BoundaryCondition::Neumann).unwrap();
        let spec = ProblemSpec::builder(mesh)
            .shift(40.0)
            .horizon(1.0, 0.01)
            .y0(Field::constant(9, 1.0))
            .build()
            .unwrap();
        let u = ControlTrajectory::zeros(0.01, spec.steps(), 1);
        assert!(matches!(solve_state(&spec, &u), Err(Error::Divergence { .. })));
    }

    #[test]
    fn consistency_orders() {
        let terminal = |scheme: Scheme, dt: f64| {
            let spec = heat_spec(41, dt, 0.2);
            let u = ControlTrajectory::zeros(dt, spec.steps(), 1);
            integrate(&spec, spec.y0(), &u, scheme).unwrap().last().to_vec()
        };
        let mesh = crate::mesh::SpatialMesh::unit(1, 41, BoundaryCondition::Neumann).unwrap();
        for (scheme, lo, hi) in [(Scheme::ImplicitEuler, 1.7, 2.4), (Scheme::CrankNicolson, 3.3, 4.8)] {
            let a = terminal(scheme, 0.02);
            let b = terminal(scheme, 0.01);
            let c = terminal(scheme, 0.005);
            let d1: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let d2: Vec<f64> = b.iter().zip(&c).map(|(x, y)| x - y).collect();
            let ratio = mesh.norm_l2(&d1) / mesh.norm_l2(&d2);
            assert!(ratio > lo && ratio < hi, "{scheme:?}: {ratio}");
        }
    }

    #[test]
    fn solver_does_not_modify_controls() {
        let spec = heat_spec(11, 0.05, 1.0);
        let u = ControlTrajectory::new(0.05, (0..20).map(|k| vec![0.1 * (k as f64).sin()]).collect());
        let copy = u.clone();
        solve_state(&spec, &u).unwrap();
        assert_eq!(u, copy);
    }
}
