//! Riccati feedback for the discrete linearization and the sampled
//! smallness constants that go with it.
//!
//! Dense work happens in mass-symmetrized coordinates `z = M^{1/2} y`, where
//! `Ã = M^{1/2} A M^{-1/2}` is a symmetric matrix and the state cost is the
//! Euclidean norm. The CARE
//!
//! ```text
//! Ã^T P + P Ã - (1/alpha) P B̃ B̃^T P + I = 0
//! ```
//!
//! is started from the matrix-sign solution of the Hamiltonian and polished
//! by Newton–Kleinman steps; each Lyapunov solve also uses the sign
//! iteration.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{tail_check, trajectory_norms, ControlTrajectory, Trajectory};
use crate::mesh::{EllipticOperator, SpatialMesh};
use crate::model::{euclid, random_smooth_field, ControlOperator, ProblemSpec};

pub const DEFAULT_DENSE_CAP: usize = 256;

#[derive(Clone, Debug)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub residual: f64,
    pub newton_steps: usize,
}

fn matrix_sign(mut z: DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    for _ in 0..max_iter {
        let inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotStabilizable("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
        // determinant-free scaling
        let c = (inv.norm() / z.norm()).sqrt();
        let next = (&z * c + inv / c) * 0.5;
        let delta = (&next - &z).norm();
        z = next;
        if delta <= tol * z.norm() {
            return Ok(z);
        }
    }
    Err(Error::NotStabilizable("matrix sign iteration did not converge".into()))
}

/// Solves `A^T X + X A + Q = 0` for Hurwitz `A`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut aj = a.clone();
    let mut qj = q.clone();
    for _ in 0..100 {
        let inv = aj
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotStabilizable("closed-loop matrix is singular".into()))?;
        let next_q = (&qj + inv.transpose() * &qj * &inv) * 0.5;
        let next_a = (&aj + &inv) * 0.5;
        let delta = (&next_a - &aj).norm();
        aj = next_a;
        qj = next_q;
        if delta <= 1e-13 * aj.norm() {
            let mut x = qj * 0.5;
            x = (&x + x.transpose()) * 0.5;
            return Ok(x);
        }
    }
    Err(Error::NotStabilizable("Lyapunov sign iteration did not converge".into()))
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, alpha: f64, p: &DMatrix<f64>) -> f64 {
    let pb = p * b;
    (a.transpose() * p + p * a - &pb * pb.transpose() / alpha + q).norm()
}

/// Stabilizing solution of `A^T P + P A - (1/alpha) P B B^T P + Q = 0`.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, alpha: f64) -> Result<CareSolution> {
    let n = a.nrows();
    let bb = b * b.transpose() / alpha;
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&bb));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let w = matrix_sign(h, 1e-13, 200)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let mut p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::NotStabilizable(format!("stable subspace extraction failed: {e}")))?;
    p = (&p + p.transpose()) * 0.5;

    let qnorm = q.norm().max(f64::MIN_POSITIVE);
    let mut residual = care_residual(a, b, q, alpha, &p);
    let mut steps = 0;
    while steps < 20 && residual > 1e-13 * qnorm {
        let k = b.transpose() * &p / alpha;
        let ak = a - b * &k;
        let qk = q + k.transpose() * &k * alpha;
        let next = solve_lyapunov(&ak, &qk)?;
        let next_res = care_residual(a, b, q, alpha, &next);
        steps += 1;
        if !(next_res < residual) {
            break;
        }
        p = next;
        residual = next_res;
    }
    if !residual.is_finite() || residual > 1e-8 * qnorm {
        return Err(Error::NotStabilizable(format!("Riccati residual {residual:.3e} too large")));
    }
    Ok(CareSolution { p, residual, newton_steps: steps })
}

const SCHUR_MAX_ITER: usize = 10_000;

/// Max real part of the spectrum of a dense matrix; NaN when the Schur
/// iteration does not converge.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    // nalgebra's `complex_eigenvalues` iterates without a bound at machine
    // epsilon and can spin forever on stiff closed loops
    let eps = 1e-14;
    match nalgebra::linalg::Schur::try_new(m.clone(), eps, SCHUR_MAX_ITER) {
        Some(schur) => schur.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
        None => f64::NAN,
    }
}

/// Stabilizing gain `u = -K y` for the discrete linearization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackGain {
    /// `K` as `m` rows of nodal weights: `(K y)_i = sum_j k[i][j] y_j`.
    pub k: Vec<Vec<f64>>,
    pub margin: f64,
    /// Sampled `M_K`, filled in by [`smallness_estimates`].
    pub m_k: Option<f64>,
    /// Riccati matrix in symmetrized coordinates.
    #[serde(skip)]
    pub p_sym: Option<DMatrix<f64>>,
    pub riccati_residual: f64,
    #[serde(skip)]
    sqrt_w: Vec<f64>,
}

impl FeedbackGain {
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        self.k.iter().map(|row| row.iter().zip(y).map(|(a, b)| a * b).sum()).collect()
    }

    /// `P y` for the `L^2`-self-adjoint Riccati operator, so that the
    /// linear-quadratic value is `0.5 (P y, y)_M`.
    pub fn riccati_apply(&self, y: &[f64]) -> Option<Vec<f64>> {
        let p = self.p_sym.as_ref()?;
        let z = DVector::from_iterator(y.len(), y.iter().zip(&self.sqrt_w).map(|(a, s)| a * s));
        let pz = p * z;
        Some(pz.iter().zip(&self.sqrt_w).map(|(a, s)| a / s).collect())
    }

    /// `0.5 (P y, y)_M`
    pub fn quadratic_value(&self, y: &[f64]) -> Option<f64> {
        let p = self.p_sym.as_ref()?;
        let z = DVector::from_iterator(y.len(), y.iter().zip(&self.sqrt_w).map(|(a, s)| a * s));
        Some(0.5 * z.dot(&(p * &z)))
    }

    /// Operator norm `||K||_{L(Y, R^m)}`.
    pub fn operator_norm(&self) -> f64 {
        let m = self.k.len();
        let n = self.sqrt_w.len();
        let kt = DMatrix::from_fn(m, n, |i, j| self.k[i][j] / self.sqrt_w[j]);
        kt.singular_values().iter().copied().fold(0.0, f64::max)
    }

    /// Gain on another mesh of the same domain: `K_f y = K (R y)` with `R`
    /// the multilinear interpolation onto the coarse nodes.
    pub fn lift_to(&self, coarse: &SpatialMesh, fine: &SpatialMesh) -> Result<FeedbackGain> {
        if coarse.dimension() != fine.dimension() || coarse.bc() != fine.bc() {
            return Err(Error::Invalid("gain transfer needs meshes of the same kind".into()));
        }
        let nf = fine.node_count();
        let mut k = vec![vec![0.0; nf]; self.k.len()];
        for c in 0..coarse.node_count() {
            let x = coarse.coordinates(c);
            for (j, w) in interpolation_weights(fine, x) {
                for (row_f, row_c) in k.iter_mut().zip(&self.k) {
                    row_f[j] += row_c[c] * w;
                }
            }
        }
        Ok(FeedbackGain {
            k,
            margin: self.margin,
            m_k: None,
            p_sym: None,
            riccati_residual: self.riccati_residual,
            sqrt_w: fine.weights().iter().map(|w| w.sqrt()).collect(),
        })
    }
}

fn axis_weights_at(mesh: &SpatialMesh, x: f64) -> Vec<(usize, f64)> {
    let n = mesh.nodes_per_axis();
    let h = mesh.spacing();
    let offset = match mesh.bc() {
        crate::mesh::BoundaryCondition::Neumann => 0.0,
        crate::mesh::BoundaryCondition::Dirichlet => h,
    };
    let s = ((x - offset) / h).clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    let f = s - i as f64;
    vec![(i, 1.0 - f), (i + 1, f)]
}

pub(crate) fn interpolation_weights(mesh: &SpatialMesh, x: [f64; 2]) -> Vec<(usize, f64)> {
    let wx = axis_weights_at(mesh, x[0]);
    if mesh.dimension() == 1 {
        return wx;
    }
    let n = mesh.nodes_per_axis();
    let wy = axis_weights_at(mesh, x[1]);
    let mut out = Vec::with_capacity(4);
    for &(i, a) in &wx {
        for &(j, b) in &wy {
            out.push((i + n * j, a * b));
        }
    }
    out
}

fn symmetrized(op: &EllipticOperator, b: &ControlOperator) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let mesh = op.mesh();
    let s: Vec<f64> = mesh.weights().iter().map(|w| w.sqrt()).collect();
    let a = op.to_dense();
    let n = a.nrows();
    let mut at = DMatrix::from_fn(n, n, |i, j| s[i] * a[(i, j)] / s[j]);
    at = (&at + at.transpose()) * 0.5;
    let bt = DMatrix::from_fn(n, b.actuator_count(), |i, j| s[i] * b.columns()[j][i]);
    (at, bt, s)
}

pub fn riccati_gain(op: &EllipticOperator, b: &ControlOperator, alpha: f64) -> Result<FeedbackGain> {
    riccati_gain_capped(op, b, alpha, DEFAULT_DENSE_CAP)
}

pub fn riccati_gain_capped(
    op: &EllipticOperator,
    b: &ControlOperator,
    alpha: f64,
    cap: usize,
) -> Result<FeedbackGain> {
    let n = op.node_count();
    if n > cap {
        return Err(Error::Invalid(format!("{n} nodes exceed the dense Riccati cap {cap}")));
    }
    let (at, bt, s) = symmetrized(op, b);
    let eye = DMatrix::identity(n, n);
    let sol = solve_care(&at, &bt, &eye, alpha)?;
    let kt = bt.transpose() * &sol.p / alpha;
    let margin = spectral_abscissa(&(&at - &bt * &kt));
    if !(margin < 0.0) {
        return Err(Error::NotStabilizable(format!("closed-loop margin {margin:.3e} is not negative")));
    }
    let k = (0..kt.nrows()).map(|i| (0..n).map(|j| kt[(i, j)] * s[j]).collect()).collect();
    Ok(FeedbackGain {
        k,
        margin,
        m_k: None,
        p_sym: Some(sol.p),
        riccati_residual: sol.residual,
        sqrt_w: s,
    })
}

/// Riccati gain for the problem's linearization. Above the dense cap the
/// gain is computed on a coarser mesh of the same domain and lifted.
pub fn gain_for_spec(spec: &ProblemSpec, cap: usize) -> Result<FeedbackGain> {
    let mesh = spec.mesh();
    let op = spec.operator();
    if mesh.node_count() <= cap {
        return riccati_gain_capped(op, spec.control(), spec.alpha(), cap);
    }
    let per_axis = match mesh.dimension() {
        1 => cap,
        _ => (cap as f64).sqrt().floor() as usize,
    };
    let coarse = SpatialMesh::new(mesh.dimension(), per_axis.max(2), mesh.length(), mesh.bc())?;
    let columns = spec
        .control()
        .columns()
        .iter()
        .map(|col| {
            (0..coarse.node_count())
                .map(|c| {
                    interpolation_weights(mesh, coarse.coordinates(c)).iter().map(|(j, w)| col[*j] * w).sum()
                })
                .collect()
        })
        .collect();
    let b = ControlOperator::from_columns(&coarse, columns)?;
    let coarse_op = crate::mesh::assemble_operator(&coarse, op.shift());
    let gain = riccati_gain_capped(&coarse_op, &b, spec.alpha(), cap)?;
    gain.lift_to(&coarse, mesh)
}

/// [`gain_for_spec`] memoized on the data the gain depends on: mesh,
/// operator shift, actuators and `alpha`. Solves that differ only in the
/// initial state or the horizon share one dense Riccati solve.
pub fn cached_gain(spec: &ProblemSpec) -> Result<Arc<FeedbackGain>> {
    static CACHE: OnceLock<Mutex<HashMap<Vec<u64>, Arc<FeedbackGain>>>> = OnceLock::new();
    let mesh = spec.mesh();
    let mut key = vec![
        mesh.dimension() as u64,
        mesh.nodes_per_axis() as u64,
        mesh.length().to_bits(),
        matches!(mesh.bc(), crate::mesh::BoundaryCondition::Neumann) as u64,
        spec.operator().shift().to_bits(),
        spec.alpha().to_bits(),
    ];
    for col in spec.control().columns() {
        key.extend(col.iter().map(|v| v.to_bits()));
    }
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(g) = cache.lock().expect("gain cache poisoned").get(&key) {
        return Ok(Arc::clone(g));
    }
    let gain = Arc::new(gain_for_spec(spec, DEFAULT_DENSE_CAP)?);
    cache.lock().expect("gain cache poisoned").insert(key, Arc::clone(&gain));
    Ok(gain)
}

/// Max real part of the spectrum of `A_h - B_h K`.
pub fn stability_margin(op: &EllipticOperator, b: &ControlOperator, k: &[Vec<f64>]) -> Result<f64> {
    stability_margin_capped(op, b, k, DEFAULT_DENSE_CAP)
}

pub fn stability_margin_capped(
    op: &EllipticOperator,
    b: &ControlOperator,
    k: &[Vec<f64>],
    cap: usize,
) -> Result<f64> {
    let n = op.node_count();
    if k.len() != b.actuator_count() || k.iter().any(|r| r.len() != n) {
        return Err(Error::Invalid("gain shape does not match (m, nodes)".into()));
    }
    if n <= cap {
        let a = op.to_dense();
        let bk = DMatrix::from_fn(n, n, |i, j| {
            b.columns().iter().zip(k).map(|(col, row)| col[i] * row[j]).sum::<f64>()
        });
        let margin = spectral_abscissa(&(a - bk));
        if !margin.is_finite() {
            return Err(Error::EigenNotConverged { residual: f64::NAN, iterations: SCHUR_MAX_ITER });
        }
        return Ok(margin);
    }
    resolvent_margin(op, b, k)
}

/// Rightmost eigenvalue by power iteration on `(sigma - (A - BK))^{-1}`.
fn resolvent_margin(op: &EllipticOperator, b: &ControlOperator, k: &[Vec<f64>]) -> Result<f64> {
    let mesh = op.mesh();
    let n = op.node_count();
    let m = k.len();
    let kb_norm: f64 = k.iter().map(|r| euclid(r)).sum::<f64>()
        * b.columns().iter().map(|c| euclid(c)).fold(0.0, f64::max);
    let sigma = crate::mesh::leading_eigenvalue(op)? + kb_norm + 1.0;
    let solve_a = |r: &[f64]| op.solve_shifted_diag(sigma, None, r, 1e-13);
    // Woodbury pieces: Z = (sigma - A)^{-1} B, S = I + K Z
    let z: Vec<Vec<f64>> = b.columns().iter().map(|c| solve_a(c)).collect::<Result<_>>()?;
    let s = DMatrix::from_fn(m, m, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) + k[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let s_lu = s.lu();
    let apply = |x: &[f64]| -> Result<Vec<f64>> {
        let mut w = solve_a(x)?;
        let kw = DVector::from_iterator(m, k.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()));
        let c = s_lu.solve(&kw).ok_or_else(|| Error::Invalid("singular Woodbury core".into()))?;
        for j in 0..m {
            for i in 0..n {
                w[i] -= z[j][i] * c[j];
            }
        }
        Ok(w)
    };
    let mut x = vec![1.0; n];
    let mut mu = 0.0;
    for it in 0..100_000 {
        let y = apply(&x)?;
        let ny = mesh.norm_l2(&y);
        let nx = mesh.norm_l2(&x);
        let new_mu = mesh.dot(&y, &x) / (nx * nx);
        x = y.iter().map(|v| v / ny).collect();
        if it > 10 && (new_mu - mu).abs() <= 1e-12 * new_mu.abs() {
            return Ok(sigma - 1.0 / new_mu);
        }
        mu = new_mu;
    }
    Err(Error::EigenNotConverged { residual: mu, iterations: 100_000 })
}

/// Closed loop with explicit feedback `u_k = P(-K y_k)` (clipped when
/// `clip` is set) under the full nonlinear dynamics.
pub fn closed_loop(
    spec: &ProblemSpec,
    gain: &FeedbackGain,
    y0: &[f64],
    clip: bool,
) -> Result<(Trajectory, ControlTrajectory)> {
    let dt = spec.dt();
    let n = spec.steps();
    let mut states = vec![y0.to_vec()];
    let mut controls = Vec::with_capacity(n);
    let one_step = spec.with_steps(1);
    for k in 0..n {
        let raw: Vec<f64> = gain.apply(&states[k]).into_iter().map(|v| -v).collect();
        let u = if clip { spec.admissible().project(&raw) } else { raw };
        let uk = ControlTrajectory::new(dt, vec![u.clone()]);
        let step = crate::forward::integrate(&one_step, &states[k], &uk, crate::forward::Scheme::ImplicitEuler)
            .map_err(|e| match e {
                Error::Divergence { norm, threshold, .. } => {
                    Error::Divergence { time: (k + 1) as f64 * dt, norm, threshold }
                }
                other => other,
            })?;
        states.push(step.last().to_vec());
        controls.push(u);
    }
    Ok((Trajectory::new(dt, states), ControlTrajectory::new(dt, controls)))
}

/// Linear closed loop `y' = (A - BK) y + f` with explicit feedback.
fn linear_closed_loop(spec: &ProblemSpec, gain: &FeedbackGain, y0: &[f64], f: &dyn Fn(usize) -> Vec<f64>) -> Result<Trajectory> {
    let dt = spec.dt();
    let op = spec.operator();
    let b = spec.control();
    let mut states = vec![y0.to_vec()];
    for k in 0..spec.steps() {
        let u: Vec<f64> = gain.apply(&states[k]).into_iter().map(|v| -v).collect();
        let mut rhs: Vec<f64> = states[k].iter().map(|v| v / dt).collect();
        b.apply_add(&u, 1.0, &mut rhs);
        for (r, fv) in rhs.iter_mut().zip(f(k + 1)) {
            *r += fv;
        }
        states.push(op.solve_shifted_diag(1.0 / dt, None, &rhs, spec.tolerances().linear)?);
    }
    Ok(Trajectory::new(dt, states))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmallnessReport {
    pub m_k: f64,
    /// Sampled Lipschitz constant of `F` on small trajectories.
    pub lipschitz_c: f64,
    pub gain_norm: f64,
    /// Sampled embedding constant `sup_t ||y||_Y / ||y||_W`.
    pub embedding: f64,
    pub radius_nonlinear: Option<f64>,
    pub radius_constraint: Option<f64>,
    /// `min{1/(4 C M_K^2), eta/(2 M_K ||K|| ||I||)}`; `None` if both terms are unbounded.
    pub delta1: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

fn l2_time(spec: &ProblemSpec, fields: &[Vec<f64>]) -> f64 {
    let mesh = spec.mesh();
    fields.iter().map(|f| spec.dt() * mesh.dot(f, f)).sum::<f64>().sqrt()
}

/// Sampled estimates of `M_K`, `C`, `||K||`, `||I||` and the admissible
/// radius `delta1`.
pub fn smallness_estimates(
    spec: &ProblemSpec,
    gain: &FeedbackGain,
    samples: usize,
    seed: u64,
) -> Result<SmallnessReport> {
    let mesh = spec.mesh();
    let op = spec.operator();
    let nl = spec.nonlinearity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m_k: f64 = 0.0;
    let mut embedding: f64 = 0.0;
    let mut trajs: Vec<(Trajectory, f64)> = Vec::with_capacity(samples);
    for _ in 0..samples.max(2) {
        let scale: f64 = rng.gen_range(0.2..1.0) * 0.05;
        let y0 = random_smooth_field(mesh, &mut rng, 4).scaled(scale);
        let forcing: Option<(crate::mesh::Field, f64)> = if rng.gen_bool(0.5) {
            Some((random_smooth_field(mesh, &mut rng, 4).scaled(scale * rng.gen_range(0.0..1.0)), rng.gen_range(0.5..3.0)))
        } else {
            None
        };
        let dt = spec.dt();
        let f_at = |k: usize| -> Vec<f64> {
            match &forcing {
                Some((g, rate)) => g.scaled((-rate * k as f64 * dt).exp()).into_vec(),
                None => vec![0.0; y0.len()],
            }
        };
        let y = linear_closed_loop(spec, gain, &y0, &f_at)?;
        let f_norm = l2_time(spec, &(1..=spec.steps()).map(f_at).collect::<Vec<_>>());
        let data = mesh.norm_h1(&y0) + f_norm;
        let w = trajectory_norms(&y, op).w_norm;
        if data > 0.0 && w > 0.0 {
            m_k = m_k.max(w / data);
            let sup = y.states().iter().map(|s| mesh.norm_l2(s)).fold(0.0, f64::max);
            embedding = embedding.max(sup / w);
            trajs.push((y, w));
        }
    }
    if trajs.is_empty() {
        return Err(Error::DegenerateFit("all sampled trajectories vanish".into()));
    }
    let mut c: f64 = 0.0;
    if !nl.is_zero() {
        for i in 0..trajs.len() {
            let (y1, w1) = &trajs[i];
            let (y2, w2) = &trajs[(i + 1) % trajs.len()];
            let near = Trajectory::new(y1.dt(), y1.states().iter().map(|s| s.iter().map(|v| 0.9 * v).collect()).collect());
            for (other, w_other) in [(y2, *w2), (&near, 0.9 * w1)] {
                let diff = y1.difference(other);
                let dw = trajectory_norms(&diff, op).w_norm;
                if dw == 0.0 {
                    continue;
                }
                let df: Vec<Vec<f64>> = y1
                    .states()
                    .iter()
                    .zip(other.states())
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| nl.eval(*x) - nl.eval(*y)).collect())
                    .collect();
                let mesh_int: f64 = {
                    let vals: Vec<f64> = df.iter().map(|f| mesh.dot(f, f)).collect();
                    let n = vals.len();
                    spec.dt() * (vals[1..n - 1].iter().sum::<f64>() + 0.5 * (vals[0] + vals[n - 1]))
                };
                c = c.max(mesh_int.sqrt() / (w1.max(w_other) * dw));
            }
        }
    }
    let gain_norm = gain.operator_norm();
    let eta = spec.admissible().eta();
    let radius_nonlinear = (c > 0.0).then(|| 1.0 / (4.0 * c * m_k * m_k));
    let radius_constraint =
        (eta.is_finite() && gain_norm > 0.0).then(|| eta / (2.0 * m_k * gain_norm * embedding));
    let delta1 = match (radius_nonlinear, radius_constraint) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    Ok(SmallnessReport {
        m_k,
        lipschitz_c: c,
        gain_norm,
        embedding,
        radius_nonlinear,
        radius_constraint,
        delta1,
        samples: trajs.len(),
        seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopTrial {
    pub y0_h1: f64,
    pub tail_passed: bool,
    pub max_control: f64,
    pub feasible: bool,
}

/// Unclipped nonlinear closed loops `u = -K y` from random data of `H^1`
/// norm at most `radius`.
pub fn closed_loop_trials(
    spec: &ProblemSpec,
    gain: &FeedbackGain,
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<ClosedLoopTrial>> {
    let mesh = spec.mesh();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = spec.admissible().eta();
    (0..trials)
        .map(|_| {
            let r = radius * rng.gen_range(0.05..1.0);
            let y0 = random_smooth_field(mesh, &mut rng, 4).scaled(r);
            let (y, u) = closed_loop(spec, gain, &y0, false)?;
            let tail = tail_check(mesh, &y, spec.tolerances().tail);
            let max_control = u.max_norm();
            Ok(ClosedLoopTrial {
                y0_h1: mesh.norm_h1(&y0),
                tail_passed: tail.passed,
                max_control,
                feasible: max_control <= eta,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_operator, BoundaryCondition};
    use crate::model::Actuator;

    fn scalar(a: f64, b: f64, alpha: f64) -> CareSolution {
        solve_care(
            &DMatrix::from_element(1, 1, a),
            &DMatrix::from_element(1, 1, b),
            &DMatrix::from_element(1, 1, 1.0),
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn scalar_riccati_closed_forms() {
        let s = scalar(0.0, 1.0, 1.0);
        assert!((s.p[(0, 0)] - 1.0).abs() < 1e-12);
        let s = scalar(-1.0, 0.0, 1.0);
        assert!((s.p[(0, 0)] - 0.5).abs() < 1e-12);
        // 2aP - P^2/alpha + 1 = 0, positive root
        let (a, alpha) = (2.0f64, 0.1f64);
        let exact = alpha * (a + (a * a + 1.0 / alpha).sqrt());
        assert!((scalar(a, 1.0, alpha).p[(0, 0)] - exact).abs() < 1e-12);
    }

    #[test]
    fn scalar_margin_improves_with_cheaper_control() {
        let mut last = f64::INFINITY;
        for alpha in [10.0, 1.0, 0.1, 0.01] {
            let p = scalar(1.0, 1.0, alpha).p[(0, 0)];
            let margin = 1.0 - p / alpha;
            assert!(margin <= last);
            last = margin;
        }
    }

    #[test]
    fn uncontrollable_unstable_mode_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(solve_care(&a, &b, &DMatrix::identity(2, 2), 1.0).is_err());
    }

    #[test]
    fn schlogl_linearization_is_stabilized() {
        let mesh = SpatialMesh::unit(1, 24, BoundaryCondition::Neumann).unwrap();
        let op = assemble_operator(&mesh, 2.0);
        let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)]).unwrap();
        let zero = vec![vec![0.0; 24]];
        assert!((stability_margin(&op, &b, &zero).unwrap() - 2.0).abs() < 1e-9);
        let g = riccati_gain(&op, &b, 0.1).unwrap();
        assert!(g.margin < 0.0);
        assert!(g.riccati_residual <= 1e-8 * (24f64).sqrt());
        let m = stability_margin(&op, &b, &g.k).unwrap();
        assert!((m - g.margin).abs() < 1e-8);
        // resolvent estimate above the dense cap agrees
        let r = stability_margin_capped(&op, &b, &g.k, 4).unwrap();
        assert!((r - m).abs() < 1e-6 * m.abs(), "{r} vs {m}");
        let p = g.p_sym.as_ref().unwrap();
        assert!((p - p.transpose()).norm() < 1e-12 * p.norm());
        assert!(p.symmetric_eigenvalues().iter().all(|v| *v > -1e-10));
    }

    #[test]
    fn neumann_margins_without_feedback() {
        let mesh = SpatialMesh::unit(1, 10, BoundaryCondition::Neumann).unwrap();
        let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.2, 0.6)]).unwrap();
        let zero = vec![vec![0.0; 10]];
        for c in [-1.0, 1.0] {
            let op = assemble_operator(&mesh, c);
            assert!((stability_margin(&op, &b, &zero).unwrap() - c).abs() < 1e-9);
        }
    }

    #[test]
    fn stable_operator_gain_is_small() {
        let mesh = SpatialMesh::unit(1, 15, BoundaryCondition::Dirichlet).unwrap();
        let op = assemble_operator(&mesh, 0.0);
        let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.3, 0.7)]).unwrap();
        let g = riccati_gain(&op, &b, 1.0).unwrap();
        let open = crate::mesh::leading_eigenvalue(&op).unwrap();
        assert!(g.margin <= open + 1e-9);
        assert!(g.operator_norm() < 0.1);
    }

    #[test]
    fn lifted_gain_reproduces_coarse_action_on_smooth_fields() {
        let coarse = SpatialMesh::unit(1, 9, BoundaryCondition::Neumann).unwrap();
        let fine = SpatialMesh::unit(1, 33, BoundaryCondition::Neumann).unwrap();
        let op = assemble_operator(&coarse, 1.0);
        let b = ControlOperator::from_actuators(&coarse, &[Actuator::interval(0.0, 0.5)]).unwrap();
        let g = riccati_gain(&op, &b, 1.0).unwrap();
        let gf = g.lift_to(&coarse, &fine).unwrap();
        let yc = coarse.sample(|p| 1.0 + p[0]);
        let yf = fine.sample(|p| 1.0 + p[0]);
        assert!((g.apply(&yc)[0] - gf.apply(&yf)[0]).abs() < 1e-12);
    }
}
