//! Value-function gradient `V'(y0) = -p(0)`, its finite-difference check,
//! and the HJB residual at sampled states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentReport, Table, Verdict};
use crate::error::Result;
use crate::forward::ControlTrajectory;
use crate::mesh::{assemble_operator, solve_shifted, Field};
use crate::model::ProblemSpec;
use crate::optimize::{solve_ocp_with_tol, OptimalityResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueGradient {
    pub value: f64,
    /// Nodal gradient against the `L^2` pairing.
    pub l2: Field,
    /// `H^1` Riesz representor: `(r, v)_{H1} = (-p(0), v)_{L2}` for all `v`.
    pub h1: Field,
    pub result: OptimalityResult,
}

fn riesz_h1(spec: &ProblemSpec, g: &[f64]) -> Result<Field> {
    // (r, v)_{H1} = ((I - Laplacian) r, v)_M for the unshifted operator
    let lap = assemble_operator(spec.mesh(), 0.0);
    Ok(Field::new(solve_shifted(&lap, 1.0, g)?))
}

fn gradient_from(spec: &ProblemSpec, result: OptimalityResult) -> Result<ValueGradient> {
    let l2: Vec<f64> = result.pbar.state(0).iter().map(|p| -p).collect();
    let h1 = riesz_h1(spec, &l2)?;
    Ok(ValueGradient { value: result.cost, l2: Field::new(l2), h1, result })
}

/// `V'(y0) = -p(0)` at the converged optimum from `spec.y0()`.
pub fn value_gradient(spec: &ProblemSpec) -> Result<ValueGradient> {
    value_gradient_with(spec, None, spec.tolerances().optimizer)
}

pub(crate) fn value_gradient_with(
    spec: &ProblemSpec,
    warm_start: Option<ControlTrajectory>,
    tol: f64,
) -> Result<ValueGradient> {
    let result = solve_ocp_with_tol(spec, warm_start, tol)?;
    if !result.converged {
        return Err(crate::error::Error::NotConverged { residual: result.residual, iterations: result.iterations });
    }
    gradient_from(spec, result)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: Vec<f64>,
    /// Bound on the relative error at the smallest step.
    pub max_rel_error: f64,
    /// Accepted band for the error ratio between consecutive steps.
    pub ratio: (f64, f64),
    /// Optimizer tolerance for the probe solves.
    pub tol: f64,
    /// Rescale every direction to `||v||_{H1} = ||y0||_{H1}`, so that `eps`
    /// is a relative step.
    pub relative_step: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: vec![1e-2, 1e-3], max_rel_error: 1e-3, ratio: (50.0, 200.0), tol: 1e-11, relative_step: false }
    }
}

/// Errors at this relative level are rounding noise; no ratio is judged.
const FD_NOISE: f64 = 1e-9;

/// Central differences of the value function against `(-p(0), v)`.
pub fn gradient_fd_check(spec: &ProblemSpec, directions: &[Field], opts: &GradCheckOptions) -> Result<ExperimentReport> {
    let mesh = spec.mesh();
    let mut report = ExperimentReport::new("grad-check", spec);
    let base = value_gradient_with(spec, None, opts.tol)?;
    report.provenance.warm_start = format!("{:?}", base.result.warm_start).to_lowercase();
    report.metric("value", base.value);
    report.metric("base_residual", base.result.residual);
    report.metric("active_fraction", base.result.active_fraction);
    let y0_h1 = mesh.norm_h1(spec.y0());
    let dirs: Vec<Field> = directions
        .iter()
        .map(|v| {
            let n = mesh.norm_h1(v);
            if opts.relative_step && n > 0.0 && y0_h1 > 0.0 {
                v.scaled(y0_h1 / n)
            } else {
                v.clone()
            }
        })
        .collect();

    let probes: Vec<(usize, usize)> =
        (0..dirs.len()).flat_map(|d| (0..opts.eps.len()).map(move |e| (d, e))).collect();
    let outcomes: Vec<std::result::Result<f64, String>> = probes
        .par_iter()
        .map(|&(d, e)| {
            let v = &dirs[d];
            if v.iter().all(|x| *x == 0.0) {
                return Ok(0.0);
            }
            let eps = opts.eps[e];
            let at = |sign: f64| -> std::result::Result<f64, String> {
                let y = Field::new(spec.y0().iter().zip(v.iter()).map(|(a, b)| a + sign * eps * b).collect());
                let s = spec.with_y0(y).map_err(|e| e.to_string())?;
                let r = solve_ocp_with_tol(&s, None, opts.tol).map_err(|e| e.to_string())?;
                if !r.converged {
                    return Err(format!("probe solve stalled at residual {:.3e}", r.residual));
                }
                Ok(r.cost)
            };
            Ok((at(1.0)? - at(-1.0)?) / (2.0 * eps))
        })
        .collect();

    let mut table = Table::new(&["eps", "direction_id", "fd", "exact", "rel_error"]);
    let mut checked = 0;
    for (d, v) in dirs.iter().enumerate() {
        let exact = mesh.dot(&base.l2, v);
        let rows: Vec<_> = (0..opts.eps.len()).map(|e| &outcomes[d * opts.eps.len() + e]).collect();
        if let Some(Err(msg)) = rows.iter().find(|r| r.is_err()) {
            report.note(format!("direction {d} skipped: {msg}"));
            continue;
        }
        checked += 1;
        let mut errors = Vec::new();
        for (e, r) in rows.iter().enumerate() {
            let fd = *r.as_ref().unwrap();
            let rel = if exact == 0.0 { fd.abs() } else { (fd - exact).abs() / exact.abs() };
            table.push(vec![opts.eps[e], d as f64, fd, exact, rel]);
            errors.push(rel);
        }
        if v.iter().all(|x| *x == 0.0) {
            report.note(format!("direction {d} is zero; both sides vanish and no ratio is defined"));
            report.verdict(Verdict::at_most(format!("dir{d}.abs_error"), errors.iter().copied().fold(0.0, f64::max), 0.0));
            continue;
        }
        let smallest = *errors.last().unwrap();
        report.verdict(Verdict::at_most(format!("dir{d}.rel_error"), smallest, opts.max_rel_error));
        for w in 1..errors.len() {
            let (coarse, fine) = (errors[w - 1], errors[w]);
            if coarse <= FD_NOISE {
                report.note(format!(
                    "direction {d}: errors {coarse:.2e}, {fine:.2e} are at rounding level; ratio not judged"
                ));
                continue;
            }
            let ratio = coarse / fine;
            report.metric(&format!("dir{d}.ratio{w}"), ratio);
            report.verdict(Verdict::within(format!("dir{d}.ratio{w}"), ratio, opts.ratio.0, opts.ratio.1));
        }
    }
    report.metric("directions_checked", checked as f64);
    report.verdict(Verdict::holds("all_directions_checked", checked == dirs.len()));
    report.tables.insert("fd".into(), table);
    Ok(report)
}

/// Both HJB residual forms at one state, from a fresh solve there.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HjbTerms {
    pub value: f64,
    pub norm_l2_sq: f64,
    /// `V'(y)(Ay + F(y)) + |y|^2/2 + (alpha/2)|u|^2 + (B^*V'(y), u)` with
    /// `u = P(-B^*V'(y)/alpha)`.
    pub continuous: f64,
    /// Dynamic-programming form of the same identity over the first step:
    /// `Vbar' . (y_1 - y)/dt + |y_1|^2/2 + (alpha/2)|u_0|^2`, where `Vbar'` is
    /// the Simpson average of `V'` over the segment from `y` to `y_1`.
    pub consistent: f64,
    pub converged: bool,
}

pub fn hjb_terms(spec: &ProblemSpec, y: &Field) -> Result<HjbTerms> {
    let s = spec.with_y0(y.clone())?;
    let r = solve_ocp_with_tol(&s, None, spec.tolerances().optimizer)?;
    let mesh = s.mesh();
    let alpha = s.alpha();
    let nl = s.nonlinearity();
    let p0 = r.pbar.state(0);
    let vprime: Vec<f64> = p0.iter().map(|v| -v).collect();

    let mut drift = s.operator().apply(y);
    for (d, f) in drift.iter_mut().zip(nl.eval_field(y)) {
        *d += f;
    }
    let bv = s.control().adjoint(mesh, &vprime);
    let u = s.admissible().project(&bv.iter().map(|v| -v / alpha).collect::<Vec<_>>());
    let u_sq: f64 = u.iter().map(|v| v * v).sum();
    let continuous = mesh.dot(&vprime, &drift)
        + 0.5 * mesh.dot(y, y)
        + 0.5 * alpha * u_sq
        + bv.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();

    // Simpson's rule for V(y) - V(y_1) along the segment from y_1 to y; the
    // midpoint gradient comes from a solve over the remaining horizon, the
    // same horizon that y_1 sees.
    let y1 = r.ybar.state(1);
    let p1 = r.pbar.state(1);
    let mid = Field::new(y.iter().zip(y1).map(|(a, b)| 0.5 * (a + b)).collect());
    let sm = s.with_steps(s.steps() - 1).with_y0(mid)?;
    let rm = solve_ocp_with_tol(&sm, None, spec.tolerances().optimizer)?;
    let pm = rm.pbar.state(0);
    let avg: Vec<f64> = p0.iter().zip(pm).zip(p1).map(|((a, m), b)| -(a + 4.0 * m + b) / 6.0).collect();
    let slope: Vec<f64> = y1.iter().zip(y.iter()).map(|(a, b)| (a - b) / s.dt()).collect();
    let u0 = r.ubar.value(0);
    let consistent = mesh.dot(&avg, &slope)
        + 0.5 * mesh.dot(y1, y1)
        + 0.5 * alpha * u0.iter().map(|v| v * v).sum::<f64>();
    Ok(HjbTerms { value: r.cost, norm_l2_sq: mesh.dot(y, y), continuous, consistent, converged: r.converged && rm.converged })
}

/// HJB residuals at `states`; judged on the dynamic-programming form.
pub fn hjb_residual(spec: &ProblemSpec, states: &[Field]) -> Result<ExperimentReport> {
    let tol = spec.tolerances().optimizer;
    let mut report = ExperimentReport::new("hjb-scan", spec);
    let terms: Vec<Result<HjbTerms>> = states.par_iter().map(|y| hjb_terms(spec, y)).collect();
    let mut table = Table::new(&[
        "state_id",
        "norm_l2",
        "residual",
        "normalized",
        "residual_continuous",
        "normalized_continuous",
    ]);
    let mut worst: f64 = 0.0;
    let mut worst_continuous: f64 = 0.0;
    let mut used = 0;
    for (i, t) in terms.into_iter().enumerate() {
        match t {
            Ok(t) if t.converged => {
                let scale = 1.0 + t.norm_l2_sq;
                let (n, nc) = (t.consistent.abs() / scale, t.continuous.abs() / scale);
                worst = worst.max(n);
                worst_continuous = worst_continuous.max(nc);
                used += 1;
                table.push(vec![i as f64, t.norm_l2_sq.sqrt(), t.consistent, n, t.continuous, nc]);
            }
            Ok(t) => report.note(format!("state {i} skipped: optimizer stalled (value {:.3e})", t.value)),
            Err(e) => report.note(format!("state {i} skipped: {e}")),
        }
    }
    report.metric("states_used", used as f64);
    report.metric("max_normalized", worst);
    report.metric("max_normalized_continuous", worst_continuous);
    report.verdict(Verdict::at_most("max_normalized_residual", worst, 5.0 * tol));
    report.verdict(Verdict::holds("all_states_solved", used == states.len()));
    report.tables.insert("hjb".into(), table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryCondition, SpatialMesh};
    use crate::model::{AdmissibleSet, Tolerances};

    fn surrogate(y0: f64, t: f64, dt: f64) -> ProblemSpec {
        let mesh = SpatialMesh::unit(1, 5, BoundaryCondition::Neumann).unwrap();
        ProblemSpec::builder(mesh)
            .shift(0.0)
            .alpha(1.0)
            .admissible(AdmissibleSet::unconstrained())
            .horizon(t, dt)
            .y0(Field::constant(5, y0))
            .tolerances(Tolerances { optimizer: 1e-10, ..Tolerances::default() })
            .build()
            .unwrap()
    }

    #[test]
    fn zero_datum_has_zero_gradient_and_residual() {
        let s = surrogate(0.0, 2.0, 0.1);
        let g = value_gradient(&s).unwrap();
        assert!(g.l2.iter().all(|v| *v == 0.0));
        let t = hjb_terms(&s, &Field::zeros(5)).unwrap();
        assert_eq!(t.continuous, 0.0);
        assert_eq!(t.consistent, 0.0);
    }

    #[test]
    fn scalar_lqr_gradient_is_p_y0() {
        let s = surrogate(0.8, 20.0, 0.002);
        let g = value_gradient(&s).unwrap();
        for v in g.l2.iter() {
            assert!((v - 0.8).abs() < 0.01, "{v}");
        }
        // constants are their own H1 representor
        for (a, b) in g.h1.iter().zip(g.l2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = hjb_terms(&s, s.y0()).unwrap();
        assert!(t.continuous.abs() < 1e-2, "{}", t.continuous);
        assert!(t.consistent.abs() < 1e-6, "{}", t.consistent);
    }

    #[test]
    fn quadratic_value_has_exact_differences() {
        let s = surrogate(0.5, 5.0, 0.05);
        let opts = GradCheckOptions { eps: vec![1e-3], ..GradCheckOptions::default() };
        let dirs = [Field::constant(5, 1.0), Field::zeros(5)];
        let r = gradient_fd_check(&s, &dirs, &opts).unwrap();
        let rows = &r.tables["fd"].rows;
        assert!(rows[0][4] <= 1e-5, "{rows:?}");
        assert_eq!(rows[1][2], 0.0);
        assert_eq!(rows[1][3], 0.0);
        assert!(r.passed(), "{}", r.summary());
    }
}
