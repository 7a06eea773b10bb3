//! Backward adjoint recursion for `-p_t = A p + F'(ybar) p - ybar`,
//! `p(T) = 0`.
//!
//! The recursion is the exact transpose of the implicit-Euler step in
//! [`crate::forward`]: with `E_k = (I - dt A - dt F'(ybar_k))`,
//!
//! ```text
//! E_k p_{k-1} = p_k + dt q_k,   k = N..1,   p_N = 0,
//! ```
//!
//! so `p_{k-1}` is the multiplier of step `k` and pairs with the control
//! `u_{k-1}`. For the optimal control problem the source is `q_k = -ybar_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Trajectory;
use crate::mesh::SpatialMesh;
use crate::model::ProblemSpec;

/// Solves `E_k p_{k-1} = p_k + dt q_k` with `p_N = terminal`.
///
/// `source[k-1]` holds `q_k`. `coefficient` is the trajectory whose
/// `F'` values enter `E_k`; pass `None` for the pure linear operator.
pub fn backward_linear(
    spec: &ProblemSpec,
    coefficient: Option<&Trajectory>,
    source: &[Vec<f64>],
    terminal: Option<&[f64]>,
) -> Result<Trajectory> {
    let n = spec.steps();
    let dt = spec.dt();
    let nodes = spec.node_count();
    if source.len() != n {
        return Err(Error::Invalid(format!("adjoint source has {} steps, expected {n}", source.len())));
    }
    let op = spec.operator();
    let nl = spec.nonlinearity();
    let mesh = spec.mesh();
    let mut states = vec![Vec::new(); n + 1];
    states[n] = match terminal {
        Some(t) => {
            mesh.check(t)?;
            t.to_vec()
        }
        None => vec![0.0; nodes],
    };
    let guard = 1e6 * (1.0 + source.iter().map(|s| mesh.norm_l2(s)).fold(0.0, f64::max) * spec.horizon());
    for k in (1..=n).rev() {
        let rhs: Vec<f64> = states[k].iter().zip(&source[k - 1]).map(|(p, q)| p / dt + q).collect();
        let d = match coefficient {
            Some(y) if !nl.is_zero() => Some(nl.derivative_field(y.state(k))),
            _ => None,
        };
        let p = op.solve_shifted_diag(1.0 / dt, d.as_deref(), &rhs, spec.tolerances().linear)?;
        let norm = mesh.norm_l2(&p);
        if !(norm <= guard) {
            return Err(Error::Divergence { time: (k - 1) as f64 * dt, norm, threshold: guard });
        }
        states[k - 1] = p;
    }
    Ok(Trajectory::new(dt, states))
}

/// Adjoint state of the optimal control problem along `ybar`.
pub fn solve_adjoint(spec: &ProblemSpec, ybar: &Trajectory) -> Result<Trajectory> {
    let source: Vec<Vec<f64>> =
        ybar.states()[1..].iter().map(|y| y.iter().map(|v| -v).collect()).collect();
    backward_linear(spec, Some(ybar), &source, None)
}

/// Second-order adjoint: derivative of [`solve_adjoint`] in the direction of
/// a state perturbation `dy` (with `dy_0` irrelevant), i.e. the backward
/// recursion with source `-(dy_k - F''(ybar_k) pbar_{k-1} dy_k)`.
pub fn solve_second_order_adjoint(
    spec: &ProblemSpec,
    ybar: &Trajectory,
    pbar: &Trajectory,
    dy: &Trajectory,
) -> Result<Trajectory> {
    let nl = spec.nonlinearity();
    let n = spec.steps();
    let source: Vec<Vec<f64>> = (1..=n)
        .map(|k| {
            let y = ybar.state(k);
            let p = pbar.state(k - 1);
            dy.state(k)
                .iter()
                .enumerate()
                .map(|(i, v)| -(v - nl.derivatives(y[i]).1 * p[i] * v))
                .collect()
        })
        .collect();
    backward_linear(spec, Some(ybar), &source, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointDecayReport {
    /// `sup_{t >= 3T/4} ||p||_{H1} / sup_t ||p||_{H1}`
    pub ratio: f64,
    pub flagged: bool,
}

pub fn adjoint_decay_check(mesh: &SpatialMesh, p: &Trajectory) -> AdjointDecayReport {
    let norms: Vec<f64> = p.states().iter().map(|s| mesh.norm_h1(s)).collect();
    let total = norms.iter().copied().fold(0.0, f64::max);
    let start = 3 * p.steps() / 4;
    let tail = norms[start..].iter().copied().fold(0.0, f64::max);
    let ratio = if total > 0.0 { tail / total } else { 0.0 };
    AdjointDecayReport { ratio, flagged: ratio > 0.1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{solve_linearized, ControlTrajectory};
    use crate::mesh::{BoundaryCondition, Field};
    use crate::model::Nonlinearity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(nl: Nonlinearity) -> ProblemSpec {
        let mesh = SpatialMesh::unit(1, 12, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| 0.3 * (std::f64::consts::PI * p[0]).cos() + 0.1);
        ProblemSpec::builder(mesh).nonlinearity(nl).horizon(1.0, 0.05).y0(y0).build().unwrap()
    }

    fn random_traj(rng: &mut ChaCha8Rng, steps: usize, n: usize) -> Vec<Vec<f64>> {
        (0..steps).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_state_gives_zero_adjoint() {
        let s = spec(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 });
        let y = Trajectory::zeros(s.dt(), s.steps(), s.node_count());
        let p = solve_adjoint(&s, &y).unwrap();
        assert!(p.is_zero());
        let r = adjoint_decay_check(s.mesh(), &p);
        assert_eq!(r.ratio, 0.0);
        assert!(!r.flagged);
    }

    #[test]
    fn discrete_duality() {
        let s = spec(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 });
        let u = ControlTrajectory::zeros(s.dt(), s.steps(), 1);
        let ybar = crate::forward::solve_state(&s, &u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_traj(&mut rng, s.steps(), s.node_count());
        let q = random_traj(&mut rng, s.steps(), s.node_count());
        let zero = vec![0.0; s.node_count()];
        let v = solve_linearized(&s, &ybar, &zero, None, Some(&r)).unwrap();
        let z = backward_linear(&s, Some(&ybar), &q, None).unwrap();
        let mesh = s.mesh();
        let lhs: f64 = (1..=s.steps()).map(|k| s.dt() * mesh.dot(v.state(k), &q[k - 1])).sum();
        let rhs: f64 = (1..=s.steps()).map(|k| s.dt() * mesh.dot(&r[k - 1], z.state(k - 1))).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} {rhs}");
    }

    #[test]
    fn deterministic_and_linear_in_source() {
        let s = spec(Nonlinearity::Quartic { k: 1.0 });
        let u = ControlTrajectory::zeros(s.dt(), s.steps(), 1);
        let ybar = crate::forward::solve_state(&s, &u).unwrap();
        let p1 = solve_adjoint(&s, &ybar).unwrap();
        let p2 = solve_adjoint(&s, &ybar).unwrap();
        assert_eq!(p1, p2);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_traj(&mut rng, s.steps(), s.node_count());
        let b = random_traj(&mut rng, s.steps(), s.node_count());
        let ab: Vec<Vec<f64>> =
            a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
        let pa = backward_linear(&s, Some(&ybar), &a, None).unwrap();
        let pb = backward_linear(&s, Some(&ybar), &b, None).unwrap();
        let pab = backward_linear(&s, Some(&ybar), &ab, None).unwrap();
        for k in 0..=s.steps() {
            for i in 0..s.node_count() {
                let sum = pa.state(k)[i] + pb.state(k)[i];
                assert!((pab.state(k)[i] - sum).abs() <= 1e-10 * (1.0 + sum.abs()));
            }
        }
    }

    #[test]
    fn single_mode_matches_backward_quadrature() {
        // F = 0, Neumann, c = -1: the constant mode has eigenvalue -1 and
        // p(t) = -int_t^T e^{-(s-t)} ybar(s) ds along it.
        let mesh = SpatialMesh::unit(1, 9, BoundaryCondition::Neumann).unwrap();
        let dt = 1e-3;
        let s = ProblemSpec::builder(mesh)
            .shift(-1.0)
            .horizon(2.0, dt)
            .y0(Field::constant(9, 1.0))
            .build()
            .unwrap();
        let ybar = Trajectory::new(
            dt,
            (0..=s.steps()).map(|k| vec![(-0.5 * k as f64 * dt).exp(); 9]).collect(),
        );
        let p = solve_adjoint(&s, &ybar).unwrap();
        // int_0^2 e^{-s} e^{-s/2} ds
        let exact = -(1.0 - (-3.0f64).exp()) / 1.5;
        assert!((p.state(0)[0] / exact - 1.0).abs() < 0.01, "{} vs {exact}", p.state(0)[0]);
    }

    #[test]
    fn growing_state_flags_non_decaying_adjoint() {
        let s = spec(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 });
        let ybar = Trajectory::new(
            s.dt(),
            (0..=s.steps()).map(|k| vec![0.01 * (2.0 * k as f64 * s.dt()).exp(); s.node_count()]).collect(),
        );
        let p = solve_adjoint(&s, &ybar).unwrap();
        // with p(T) = 0 the tail is small by construction; a growing source
        // still concentrates the adjoint late in the horizon
        let r = adjoint_decay_check(s.mesh(), &p);
        assert!(r.ratio > 0.1 && r.flagged, "{r:?}");
    }
}
