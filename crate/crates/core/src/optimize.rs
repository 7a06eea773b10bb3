//! Projected gradient for the norm-constrained control problem and for its
//! perturbed linear-quadratic linearization.
//!
//! Controls live in `U = R^{m x N}` with `(u, v)_U = dt sum_k u_k . v_k`.
//! In that inner product the reduced gradient is `g_k = alpha u_k - B^* p_k`,
//! where `p_k` is the adjoint multiplier of step `k + 1`.

use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::adjoint::solve_adjoint;
use crate::error::{Error, Result};
use crate::forward::{check_blowup, euler_step, solve_state, ControlTrajectory, Trajectory};
use crate::mesh::Field;
use crate::model::{euclid, ProblemSpec};
use crate::stabilize::{cached_gain, closed_loop};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Relative size of cost differences treated as rounding noise.
pub const COST_NOISE: f64 = 1e-11;
/// Relative slack used to call a control point active.
pub const ACTIVE_SLACK: f64 = 1e-8;

/// `J = 0.5 dt sum_{k>=1} ||y_k||^2 + 0.5 alpha ||u||_U^2`
pub fn cost(spec: &ProblemSpec, y: &Trajectory, u: &ControlTrajectory) -> f64 {
    let mesh = spec.mesh();
    let dt = spec.dt();
    let state: f64 = y.states()[1..].iter().map(|s| mesh.dot(s, s)).sum();
    0.5 * dt * state + 0.5 * spec.alpha() * u.inner(u)
}

/// `g = alpha u - B^* p` along `y` with adjoint `p`.
fn gradient_from_adjoint(spec: &ProblemSpec, p: &Trajectory, u: &ControlTrajectory) -> ControlTrajectory {
    let mesh = spec.mesh();
    let b = spec.control();
    let alpha = spec.alpha();
    let values = (0..spec.steps())
        .map(|k| {
            let bp = b.adjoint(mesh, p.state(k));
            u.value(k)
                .iter()
                .zip(bp)
                .map(|(uv, bpv)| alpha * uv - bpv)
                .collect()
        })
        .collect();
    ControlTrajectory::new(spec.dt(), values)
}

pub fn reduced_gradient(spec: &ProblemSpec, u: &ControlTrajectory) -> Result<ControlTrajectory> {
    let y = solve_state(spec, u)?;
    let p = solve_adjoint(spec, &y)?;
    Ok(gradient_from_adjoint(spec, &p, u))
}

/// How the initial control was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    Zero,
    /// Clipped Riccati feedback `u = P(-K y)` along its own closed loop.
    Feedback,
    Given,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub residual: f64,
    pub step: f64,
    pub max_control: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimalityResult {
    pub ybar: Trajectory,
    pub ubar: ControlTrajectory,
    pub pbar: Trajectory,
    pub cost: f64,
    /// `||u - P(u - g)||_U`
    pub residual: f64,
    /// `max_k |u_k - P(B^* p_k / alpha)|`
    pub fixed_point: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_fraction: f64,
    pub warm_start: WarmStart,
    pub history: Vec<IterationRecord>,
}

impl OptimalityResult {
    /// Pointwise flags `|u_k| >= eta (1 - slack)`.
    pub fn active_points(&self, eta: f64) -> Vec<bool> {
        self.ubar
            .pointwise_norms()
            .into_iter()
            .map(|n| eta.is_finite() && n >= eta * (1.0 - ACTIVE_SLACK))
            .collect()
    }
}

/// Initial control from the clipped Riccati feedback, or zero if no gain
/// can be computed.
pub fn warm_start_control(spec: &ProblemSpec) -> (ControlTrajectory, WarmStart) {
    let zero = ControlTrajectory::zeros(spec.dt(), spec.steps(), spec.actuator_count());
    if spec.y0().iter().all(|v| *v == 0.0) {
        return (zero, WarmStart::Zero);
    }
    let attempt = cached_gain(spec).and_then(|g| closed_loop(spec, &g, spec.y0(), true));
    match attempt {
        Ok((_, u)) => (u, WarmStart::Feedback),
        Err(_) => (zero, WarmStart::Zero),
    }
}

/// The two problems share the projected-gradient driver. States are in
/// the problem's own representation; [`Reduced::output`] maps them to the
/// full state.
trait Reduced {
    fn spec(&self) -> &ProblemSpec;
    fn initial(&self) -> &[f64];
    /// State `k + 1` from state `k` under `u_k`.
    fn step(&self, k: usize, prev: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    fn cost(&self, y: &Trajectory, u: &ControlTrajectory) -> f64;
    /// Adjoint source `q_k`, `k = 1..=N`.
    fn source(&self, y: &Trajectory, k: usize) -> Vec<f64>;
    /// Diagonal `F'` entering the step matrix `E_k`.
    fn coefficient(&self, y: &Trajectory, k: usize) -> Option<Vec<f64>>;
    /// Linear part of the gradient that does not come from the adjoint.
    fn shift(&self) -> Option<&ControlTrajectory> {
        None
    }
    fn output(&self, y: Trajectory) -> Trajectory {
        y
    }
    fn is_quadratic(&self) -> bool {
        false
    }
}

struct Nonlinear<'a>(&'a ProblemSpec);

impl Reduced for Nonlinear<'_> {
    fn spec(&self) -> &ProblemSpec {
        self.0
    }
    fn initial(&self) -> &[f64] {
        self.0.y0()
    }
    fn step(&self, k: usize, prev: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let next = euler_step(self.0, prev, u, k + 1)?;
        check_blowup(self.0, self.0.y0(), &next, k + 1)?;
        Ok(next)
    }
    fn cost(&self, y: &Trajectory, u: &ControlTrajectory) -> f64 {
        cost(self.0, y, u)
    }
    fn source(&self, y: &Trajectory, k: usize) -> Vec<f64> {
        y.state(k).iter().map(|v| -v).collect()
    }
    fn coefficient(&self, y: &Trajectory, k: usize) -> Option<Vec<f64>> {
        let nl = self.0.nonlinearity();
        (!nl.is_zero()).then(|| nl.derivative_field(y.state(k)))
    }
}

/// Control parametrization `u_k = mu_k - K_k (y_k - yref_k)`.
///
/// On unstable dynamics the open-loop map `u -> y` amplifies perturbations
/// by `exp(c T)`, and the reduced Hessian in `u` has condition number of
/// order `exp(2 c T)`. Gradient steps taken in `mu` with the Riccati gain
/// stay well conditioned. `K_k` is switched off where the reference control
/// lies on the constraint boundary, so a fixed point of the projected
/// iteration in `mu` is a stationary point of the original problem.
#[derive(Clone)]
pub(crate) struct Frame {
    /// Rows of `K`, and the same rows divided by the mass weights.
    rows: Option<Arc<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    free: Vec<bool>,
}

impl Frame {
    pub(crate) fn open(steps: usize) -> Self {
        Self { rows: None, free: vec![false; steps] }
    }

    fn gain_rows(spec: &ProblemSpec) -> Option<Arc<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
        let gain = cached_gain(spec).ok()?;
        let w = spec.mesh().weights();
        let scaled = gain.k.iter().map(|row| row.iter().zip(w).map(|(k, w)| k / w).collect()).collect();
        Some(Arc::new((gain.k.clone(), scaled)))
    }

    /// Frame at the control `u`, with the problem's cached Riccati gain.
    pub(crate) fn at(spec: &ProblemSpec, u: &ControlTrajectory) -> Self {
        let Some(rows) = Self::gain_rows(spec) else {
            return Self::open(u.steps());
        };
        let eta = spec.admissible().eta();
        let free = u.pointwise_norms().into_iter().map(|n| !(eta.is_finite() && n >= eta * (1.0 - ACTIVE_SLACK))).collect();
        Self { rows: Some(rows), free }
    }

    /// `K_k (y - yref)`, or `None` where the feedback is off.
    fn feedback(&self, k: usize, y: &[f64], yref: &[f64]) -> Option<Vec<f64>> {
        let rows = self.rows.as_ref().filter(|_| self.free[k])?;
        Some(rows.0.iter().map(|row| row.iter().zip(y.iter().zip(yref)).map(|(a, (b, c))| a * (b - c)).sum()).collect())
    }

    /// `M^{-1} K_k^T d`
    fn lifted(&self, k: usize, d: &[f64]) -> Option<Vec<f64>> {
        let rows = self.rows.as_ref().filter(|_| self.free[k])?;
        let n = rows.1[0].len();
        let mut out = vec![0.0; n];
        for (row, di) in rows.1.iter().zip(d) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * di;
            }
        }
        Some(out)
    }
}

/// States and controls generated by `mu = target` in `frame` around the
/// reference states `yref`; controls are projected pointwise when `project`.
fn rollout(
    problem: &dyn Reduced,
    frame: &Frame,
    yref: &Trajectory,
    target: &ControlTrajectory,
    project: bool,
) -> Result<(Trajectory, ControlTrajectory)> {
    let spec = problem.spec();
    let set = spec.admissible();
    let n = spec.steps();
    let mut states = Vec::with_capacity(n + 1);
    states.push(problem.initial().to_vec());
    let mut controls = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = target.value(k).to_vec();
        if let Some(fb) = frame.feedback(k, &states[k], yref.state(k)) {
            for (a, b) in v.iter_mut().zip(fb) {
                *a -= b;
            }
        }
        let u = if project { set.project(&v) } else { v };
        let next = problem.step(k, &states[k], &u)?;
        states.push(next);
        controls.push(u);
    }
    Ok((Trajectory::new(spec.dt(), states), ControlTrajectory::new(spec.dt(), controls)))
}

/// Adjoint of the frame's closed loop and the gradient in `mu`:
///
/// ```text
/// E_k p_{k-1} = p_k + dt (q_k + M^{-1} K_k^T d_k),   d_k = alpha u_k - B^* p_k.
/// ```
///
/// With the feedback off this is the plain adjoint and `d` the reduced
/// gradient.
fn costate(problem: &dyn Reduced, frame: &Frame, y: &Trajectory, u: &ControlTrajectory) -> Result<(Trajectory, ControlTrajectory)> {
    let spec = problem.spec();
    let mesh = spec.mesh();
    let op = spec.operator();
    let b = spec.control();
    let alpha = spec.alpha();
    let shift = problem.shift();
    let n = spec.steps();
    let dt = spec.dt();
    let sources: Vec<Vec<f64>> = (1..=n).map(|k| problem.source(y, k)).collect();
    let guard = 1e6 * (1.0 + sources.iter().map(|s| mesh.norm_l2(s)).fold(0.0, f64::max) * spec.horizon());
    let grad = |k: usize, p: &[f64]| -> Vec<f64> {
        let bp = b.adjoint(mesh, p);
        u.value(k)
            .iter()
            .zip(bp)
            .enumerate()
            .map(|(i, (uv, bpv))| alpha * uv - bpv - shift.map_or(0.0, |s| s.value(k)[i]))
            .collect()
    };
    let mut p = vec![Vec::new(); n + 1];
    p[n] = vec![0.0; spec.node_count()];
    let mut d = vec![Vec::new(); n];
    for k in (1..=n).rev() {
        let mut rhs: Vec<f64> = p[k].iter().zip(&sources[k - 1]).map(|(pv, q)| pv / dt + q).collect();
        if k < n {
            let dk = grad(k, &p[k]);
            if let Some(l) = frame.lifted(k, &dk) {
                for (r, lv) in rhs.iter_mut().zip(l) {
                    *r += lv;
                }
            }
            d[k] = dk;
        }
        let coef = problem.coefficient(y, k);
        let next = op.solve_shifted_diag(1.0 / dt, coef.as_deref(), &rhs, spec.tolerances().linear)?;
        let norm = mesh.norm_l2(&next);
        if !(norm <= guard) {
            return Err(Error::Divergence { time: (k - 1) as f64 * dt, norm, threshold: guard });
        }
        p[k - 1] = next;
    }
    d[0] = grad(0, &p[0]);
    Ok((Trajectory::new(dt, p), ControlTrajectory::new(dt, d)))
}

fn pointwise_fixed_point(spec: &ProblemSpec, p: &Trajectory, u: &ControlTrajectory, shift: Option<&ControlTrajectory>) -> f64 {
    let mesh = spec.mesh();
    let set = spec.admissible();
    let alpha = spec.alpha();
    (0..spec.steps())
        .map(|k| {
            let bp = spec.control().adjoint(mesh, p.state(k));
            let target: Vec<f64> = bp
                .iter()
                .enumerate()
                .map(|(i, v)| (v + shift.map_or(0.0, |s| s.value(k)[i])) / alpha)
                .collect();
            let proj = set.project(&target);
            let d: Vec<f64> = u.value(k).iter().zip(&proj).map(|(a, b)| a - b).collect();
            euclid(&d)
        })
        .fold(0.0, f64::max)
}

fn projected_gradient(problem: &dyn Reduced, u0: ControlTrajectory, warm_start: WarmStart, tol: f64) -> Result<OptimalityResult> {
    let spec = problem.spec();
    let set = spec.admissible();
    let alpha = spec.alpha();
    let max_iter = spec.tolerances().max_iter;
    let open = Frame::open(spec.steps());
    let zero_ref = Trajectory::zeros(spec.dt(), spec.steps(), spec.node_count());
    let (mut y, mut u) = rollout(problem, &open, &zero_ref, &u0.project(set), false)?;
    let mut j = problem.cost(&y, &u);
    let mut frame = Frame::at(spec, &u);
    let (mut p, mut g) = costate(problem, &frame, &y, &u)?;
    let mut step = 1.0 / alpha;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut residual;
    let mut fixed_point;
    loop {
        let stationarity = u.add_scaled(-1.0, &g).project(set);
        residual = u.add_scaled(-1.0, &stationarity).norm();
        fixed_point = pointwise_fixed_point(spec, &p, &u, problem.shift());
        history.push(IterationRecord { iteration: iterations, cost: j, residual, step, max_control: u.max_norm() });
        if residual <= tol * (1.0 + u.norm()) && fixed_point <= 10.0 * tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        // Armijo backtracking along the projection arc in `mu`. Once cost
        // differences drop below rounding noise the test cannot be resolved;
        // a step is then accepted when it reduces the stationarity residual.
        let noise = COST_NOISE * j.abs().max(f64::MIN_POSITIVE);
        let mut s = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let target = u.add_scaled(-s, &g);
            let arc = target.project(set).add_scaled(-1.0, &u);
            let decrease = g.inner(&arc);
            if decrease >= 0.0 {
                s *= BACKTRACK;
                continue;
            }
            match rollout(problem, &frame, &y, &target, true) {
                Ok((yt, ut)) => {
                    let jt = problem.cost(&yt, &ut);
                    if jt <= j + ARMIJO_C * decrease && jt < j {
                        accepted = Some((yt, ut, jt, arc, None));
                        break;
                    }
                    if -decrease <= noise && jt <= j + noise {
                        let ft = Frame::at(spec, &ut);
                        let (pt, gt) = costate(problem, &ft, &yt, &ut)?;
                        let next = ut.add_scaled(-1.0, &ut.add_scaled(-1.0, &gt).project(set)).norm();
                        if next < residual {
                            accepted = Some((yt, ut, jt, arc, Some((ft, pt, gt))));
                            break;
                        }
                    }
                    s *= BACKTRACK;
                }
                Err(Error::Divergence { .. }) | Err(Error::Newton { .. }) => s *= BACKTRACK,
                Err(e) => return Err(e),
            }
        }
        let Some((yt, ut, jt, arc, known)) = accepted else {
            if problem.is_quadratic() && residual > tol * (1.0 + u.norm()) * 1e3 {
                return Err(Error::SecondOrderViolated("line search failed to decrease the quadratic cost".into()));
            }
            break;
        };
        let (ft, pt, gt) = match known {
            Some(k) => k,
            None => {
                let ft = Frame::at(spec, &ut);
                let (pt, gt) = costate(problem, &ft, &yt, &ut)?;
                (ft, pt, gt)
            }
        };
        let sg = gt.add_scaled(-1.0, &g);
        let curvature = arc.inner(&sg);
        if problem.is_quadratic() && curvature < -1e-12 * arc.inner(&arc) * alpha {
            return Err(Error::SecondOrderViolated(format!(
                "negative curvature {:.3e} along an accepted step",
                curvature / arc.inner(&arc)
            )));
        }
        step = if curvature > 0.0 { arc.inner(&arc) / curvature } else { 2.0 * s };
        step = step.clamp(1e-6 / alpha, 1e6 / alpha);
        u = ut;
        y = yt;
        j = jt;
        frame = ft;
        p = pt;
        g = gt;
        iterations += 1;
    }
    let eta = set.eta();
    let active = u
        .pointwise_norms()
        .into_iter()
        .filter(|n| eta.is_finite() && *n >= eta * (1.0 - ACTIVE_SLACK))
        .count();
    Ok(OptimalityResult {
        active_fraction: active as f64 / spec.steps() as f64,
        ybar: problem.output(y),
        ubar: u,
        pbar: p,
        cost: j,
        residual,
        fixed_point,
        iterations,
        converged,
        warm_start,
        history,
    })
}

/// Solves the control problem from `warm_start`, or from the clipped
/// Riccati feedback when none is given.
pub fn solve_ocp(spec: &ProblemSpec, warm_start: Option<ControlTrajectory>) -> Result<OptimalityResult> {
    solve_ocp_with_tol(spec, warm_start, spec.tolerances().optimizer)
}

pub fn solve_ocp_with_tol(spec: &ProblemSpec, warm_start: Option<ControlTrajectory>, tol: f64) -> Result<OptimalityResult> {
    let (u0, policy) = match warm_start {
        Some(u) => (u, WarmStart::Given),
        None => warm_start_control(spec),
    };
    projected_gradient(&Nonlinear(spec), u0, policy, tol)
}

/// Optimal value at `spec.y0()`; fails unless the optimizer converges.
pub fn value(spec: &ProblemSpec) -> Result<f64> {
    let r = solve_ocp(spec, None)?;
    if !r.converged {
        return Err(Error::NotConverged { residual: r.residual, iterations: r.iterations });
    }
    Ok(r.cost)
}

/// Right-hand sides `(beta1, beta2, beta3, beta4)` of the perturbed
/// optimality system. `beta1[k-1]` and `beta3[k-1]` act at `t_k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Perturbation {
    pub beta1: Vec<Vec<f64>>,
    pub beta2: ControlTrajectory,
    pub beta3: Vec<Vec<f64>>,
    pub beta4: Field,
}

impl Perturbation {
    pub fn zero(spec: &ProblemSpec) -> Self {
        let n = spec.node_count();
        Self {
            beta1: vec![vec![0.0; n]; spec.steps()],
            beta2: ControlTrajectory::zeros(spec.dt(), spec.steps(), spec.actuator_count()),
            beta3: vec![vec![0.0; n]; spec.steps()],
            beta4: Field::zeros(n),
        }
    }

    pub fn initial(spec: &ProblemSpec, beta4: Field) -> Self {
        Self { beta4, ..Self::zero(spec) }
    }

    fn check(&self, spec: &ProblemSpec) -> Result<()> {
        let n = spec.node_count();
        let ok = self.beta1.len() == spec.steps()
            && self.beta3.len() == spec.steps()
            && self.beta1.iter().chain(&self.beta3).all(|v| v.len() == n)
            && self.beta2.steps() == spec.steps()
            && self.beta2.actuator_count() == spec.actuator_count()
            && self.beta4.len() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("perturbation shapes do not match the problem".into()))
        }
    }
}

/// Internal states are the displacements `v = y - ybar`.
struct PerturbedLq<'a> {
    spec: &'a ProblemSpec,
    base: &'a OptimalityResult,
    beta: &'a Perturbation,
    /// `f''(ybar_k) pbar_{k-1}`, stored at index `k - 1`.
    curvature: Vec<Vec<f64>>,
}

impl<'a> PerturbedLq<'a> {
    fn new(spec: &'a ProblemSpec, base: &'a OptimalityResult, beta: &'a Perturbation) -> Self {
        let nl = spec.nonlinearity();
        let curvature = (1..=spec.steps())
            .map(|k| {
                let y = base.ybar.state(k);
                let p = base.pbar.state(k - 1);
                y.iter().zip(p).map(|(yi, pi)| nl.derivatives(*yi).1 * pi).collect()
            })
            .collect();
        Self { spec, base, beta, curvature }
    }

    fn full(&self, v: &Trajectory) -> Trajectory {
        let states = self
            .base
            .ybar
            .states()
            .iter()
            .zip(v.states())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Trajectory::new(self.spec.dt(), states)
    }
}

impl Reduced for PerturbedLq<'_> {
    fn spec(&self) -> &ProblemSpec {
        self.spec
    }

    fn initial(&self) -> &[f64] {
        &self.beta.beta4
    }

    fn step(&self, k: usize, prev: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let spec = self.spec;
        let dt = spec.dt();
        let mut rhs: Vec<f64> = prev.iter().zip(&self.beta.beta1[k]).map(|(v, r)| v / dt + r).collect();
        let w: Vec<f64> = u.iter().zip(self.base.ubar.value(k)).map(|(a, b)| a - b).collect();
        spec.control().apply_add(&w, 1.0, &mut rhs);
        let nl = spec.nonlinearity();
        let d = (!nl.is_zero()).then(|| nl.derivative_field(self.base.ybar.state(k + 1)));
        spec.operator().solve_shifted_diag(1.0 / dt, d.as_deref(), &rhs, spec.tolerances().linear)
    }

    fn cost(&self, v: &Trajectory, u: &ControlTrajectory) -> f64 {
        let spec = self.spec;
        let mesh = spec.mesh();
        let dt = spec.dt();
        let y = self.full(v);
        let mut j = cost(spec, &y, u) - u.inner(&self.beta.beta2);
        for k in 1..=spec.steps() {
            let vk = v.state(k);
            let curv: Vec<f64> = self.curvature[k - 1].iter().zip(vk).map(|(c, x)| c * x).collect();
            j -= dt * (0.5 * mesh.dot(&curv, vk) + mesh.dot(y.state(k), &self.beta.beta3[k - 1]));
        }
        j
    }

    fn source(&self, v: &Trajectory, k: usize) -> Vec<f64> {
        v.state(k)
            .iter()
            .zip(self.base.ybar.state(k))
            .zip(&self.curvature[k - 1])
            .zip(&self.beta.beta3[k - 1])
            .map(|(((vk, yb), c), b3)| -(yb + vk - c * vk - b3))
            .collect()
    }

    fn coefficient(&self, _: &Trajectory, k: usize) -> Option<Vec<f64>> {
        let nl = self.spec.nonlinearity();
        (!nl.is_zero()).then(|| nl.derivative_field(self.base.ybar.state(k)))
    }

    fn shift(&self) -> Option<&ControlTrajectory> {
        Some(&self.beta.beta2)
    }

    fn output(&self, v: Trajectory) -> Trajectory {
        self.full(&v)
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

/// Solves the linearization of the control problem around `base` with
/// right-hand side `beta`. The returned state is the full `ybar + v`.
pub fn solve_perturbed_lq(spec: &ProblemSpec, base: &OptimalityResult, beta: &Perturbation) -> Result<OptimalityResult> {
    beta.check(spec)?;
    let problem = PerturbedLq::new(spec, base, beta);
    projected_gradient(&problem, base.ubar.clone(), WarmStart::Given, spec.tolerances().optimizer)
}

/// Coordinates in which the reduced Hessian is expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    /// The control itself: `H = d^2 J / du^2`.
    Control,
    /// The feedback parameter `mu` of `u = mu - K (y - ybar)`, giving the
    /// congruent Hessian `L^* H L` with `L = du/dmu`. Same inertia as
    /// `H`, without the `exp(2 c T)` conditioning on unstable dynamics.
    Feedback,
}

/// Reduced Hessian and gradient at a converged point, as maps on
/// [`Coordinates`] offsets from `ubar`.
pub struct ReducedHessian<'a> {
    spec: &'a ProblemSpec,
    base: &'a OptimalityResult,
    zero: Perturbation,
    frame: Frame,
    origin: ControlTrajectory,
}

impl<'a> ReducedHessian<'a> {
    pub fn new(spec: &'a ProblemSpec, base: &'a OptimalityResult, coords: Coordinates) -> Result<Self> {
        let frame = match coords {
            Coordinates::Control => Frame::open(spec.steps()),
            Coordinates::Feedback => Frame::at(spec, &base.ubar),
        };
        let zero = Perturbation::zero(spec);
        let mut h = Self { spec, base, zero, frame, origin: ControlTrajectory::zeros(spec.dt(), 0, 0) };
        h.origin = h.quadratic_gradient(&ControlTrajectory::zeros(spec.dt(), spec.steps(), spec.actuator_count()))?;
        Ok(h)
    }

    /// Whether the feedback is active anywhere, i.e. the coordinates differ
    /// from the control.
    pub fn is_feedback(&self) -> bool {
        self.frame.rows.is_some() && self.frame.free.iter().any(|f| *f)
    }

    fn quadratic_gradient(&self, w: &ControlTrajectory) -> Result<ControlTrajectory> {
        let lq = PerturbedLq::new(self.spec, self.base, &self.zero);
        let zero = Trajectory::zeros(self.spec.dt(), self.spec.steps(), self.spec.node_count());
        let (v, u) = rollout(&lq, &self.frame, &zero, &self.base.ubar.add_scaled(1.0, w), false)?;
        Ok(costate(&lq, &self.frame, &v, &u)?.1)
    }

    pub fn apply(&self, w: &ControlTrajectory) -> Result<ControlTrajectory> {
        Ok(self.quadratic_gradient(w)?.add_scaled(-1.0, &self.origin))
    }

    /// Gradient of the nonlinear reduced cost at offset `w`, in the same
    /// coordinates (for difference checks of [`Self::apply`]).
    pub fn gradient(&self, w: &ControlTrajectory) -> Result<ControlTrajectory> {
        let problem = Nonlinear(self.spec);
        let (y, u) = rollout(&problem, &self.frame, &self.base.ybar, &self.base.ubar.add_scaled(1.0, w), false)?;
        Ok(costate(&problem, &self.frame, &y, &u)?.1)
    }
}
