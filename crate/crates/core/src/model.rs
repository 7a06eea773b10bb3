//! Problem data: reaction nonlinearities, actuators, the admissible ball and
//! the complete [`ProblemSpec`].
//!
//! Every nonlinearity is stored in normalized form `F(0) = 0`, `F'(0) = 0`;
//! the linear part of the reaction is exported by
//! [`Nonlinearity::linear_coefficient`] and folded into the operator shift.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{assemble_operator, BoundaryCondition, EllipticOperator, Field, SpatialMesh};

/// Smooth profiles with globally Lipschitz second derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C2Profile {
    /// `y^2`
    Square,
    /// `log cosh y`
    LogCosh,
    /// `y - sin y`
    SineDefect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomC2 {
    pub profile: C2Profile,
    #[serde(default = "one")]
    pub scale: f64,
    /// Linear reaction coefficient, exported to the operator shift.
    #[serde(default)]
    pub linear: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CustomC2 {
    fn default() -> Self {
        Self { profile: C2Profile::Square, scale: 1.0, linear: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    /// `F = 0`, the linear-quadratic case.
    Zero,
    /// `R(y) = a y (y - xi1)(y - xi2)` with `a < 0`.
    Schlogl { a: f64, xi1: f64, xi2: f64 },
    /// `F(y) = k y^4`
    Quartic { k: f64 },
    CustomC2(CustomC2),
}

impl Nonlinearity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Nonlinearity::Schlogl { a, xi1, xi2 } => {
                if !(a < 0.0) || !xi1.is_finite() || !xi2.is_finite() {
                    return Err(Error::Invalid("schlogl model requires a < 0 and finite roots".into()));
                }
            }
            Nonlinearity::Quartic { k } if !k.is_finite() => {
                return Err(Error::Invalid("quartic coefficient must be finite".into()));
            }
            Nonlinearity::CustomC2(ref c) if !(c.scale.is_finite() && c.linear.is_finite()) => {
                return Err(Error::Invalid("custom nonlinearity parameters must be finite".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Zero)
            || matches!(self, Nonlinearity::Quartic { k } if *k == 0.0)
            || matches!(self, Nonlinearity::CustomC2(c) if c.scale == 0.0)
    }

    /// Cubic, quadratic and linear coefficients of the expanded Schlögl
    /// polynomial `a y (y - xi1)(y - xi2)`.
    pub fn schlogl_coefficients(&self) -> Option<(f64, f64, f64)> {
        match *self {
            Nonlinearity::Schlogl { a, xi1, xi2 } => Some((a, -a * (xi1 + xi2), a * xi1 * xi2)),
            _ => None,
        }
    }

    /// Linear-in-`y` coefficient of the full reaction term.
    pub fn linear_coefficient(&self) -> f64 {
        match self {
            Nonlinearity::Schlogl { a, xi1, xi2 } => a * xi1 * xi2,
            Nonlinearity::CustomC2(c) => c.linear,
            _ => 0.0,
        }
    }

    /// Normalized `F(y)` (linear part excluded).
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Schlogl { .. } => {
                let (c3, c2, _) = self.schlogl_coefficients().unwrap();
                (c3 * y + c2) * y * y
            }
            Nonlinearity::Quartic { k } => k * y.powi(4),
            Nonlinearity::CustomC2(c) => {
                c.scale
                    * match c.profile {
                        C2Profile::Square => y * y,
                        C2Profile::LogCosh => log_cosh(y),
                        C2Profile::SineDefect => y - y.sin(),
                    }
            }
        }
    }

    /// `(F'(y), F''(y))`
    pub fn derivatives(&self, y: f64) -> (f64, f64) {
        match self {
            Nonlinearity::Zero => (0.0, 0.0),
            Nonlinearity::Schlogl { .. } => {
                let (c3, c2, _) = self.schlogl_coefficients().unwrap();
                ((3.0 * c3 * y + 2.0 * c2) * y, 6.0 * c3 * y + 2.0 * c2)
            }
            Nonlinearity::Quartic { k } => (4.0 * k * y.powi(3), 12.0 * k * y * y),
            Nonlinearity::CustomC2(c) => {
                let (d1, d2) = match c.profile {
                    C2Profile::Square => (2.0 * y, 2.0),
                    C2Profile::LogCosh => {
                        let t = y.tanh();
                        (t, 1.0 - t * t)
                    }
                    C2Profile::SineDefect => (1.0 - y.cos(), y.sin()),
                };
                (c.scale * d1, c.scale * d2)
            }
        }
    }

    /// Full reaction term including the linear part, `R(y) = F(y) + c y`.
    pub fn reaction(&self, y: f64) -> f64 {
        self.eval(y) + self.linear_coefficient() * y
    }

    /// Global Lipschitz constant of `F''`, when one exists.
    pub fn second_derivative_lipschitz(&self) -> Option<f64> {
        match self {
            Nonlinearity::Zero => Some(0.0),
            Nonlinearity::Schlogl { a, .. } => Some(6.0 * a.abs()),
            Nonlinearity::Quartic { k } if *k == 0.0 => Some(0.0),
            Nonlinearity::Quartic { .. } => None,
            Nonlinearity::CustomC2(c) => Some(
                c.scale.abs()
                    * match c.profile {
                        C2Profile::Square => 0.0,
                        // max |d/dy sech^2 y| = 4 / (3 sqrt 3)
                        C2Profile::LogCosh => 4.0 / (3.0 * 3f64.sqrt()),
                        C2Profile::SineDefect => 1.0,
                    },
            ),
        }
    }

    pub fn eval_field(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.eval(v)).collect()
    }

    pub fn derivative_field(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.derivatives(v).0).collect()
    }

    pub fn second_derivative_field(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.derivatives(v).1).collect()
    }
}

fn log_cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn f_eval(nl: &Nonlinearity, y: f64) -> f64 {
    nl.eval(y)
}

pub fn f_derivatives(nl: &Nonlinearity, y: f64) -> (f64, f64) {
    nl.derivatives(y)
}

pub fn linear_coefficient(nl: &Nonlinearity) -> f64 {
    nl.linear_coefficient()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorShape {
    Indicator,
    /// `cos^2` bump over the support box.
    Bump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actuator {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default = "default_shape")]
    pub shape: ActuatorShape,
}

fn default_shape() -> ActuatorShape {
    ActuatorShape::Indicator
}

impl Actuator {
    pub fn interval(lower: f64, upper: f64) -> Self {
        Self { lower: vec![lower], upper: vec![upper], shape: ActuatorShape::Indicator }
    }
}

/// `B_h`: columns are `L^2`-normalized actuator profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlOperator {
    columns: Vec<Vec<f64>>,
}

impl ControlOperator {
    pub fn from_actuators(mesh: &SpatialMesh, actuators: &[Actuator]) -> Result<Self> {
        if actuators.is_empty() {
            return Err(Error::Invalid("at least one actuator is required".into()));
        }
        let dim = mesh.dimension();
        let eps = 1e-12 * mesh.length();
        let mut columns = Vec::with_capacity(actuators.len());
        for (j, act) in actuators.iter().enumerate() {
            if act.lower.len() != dim || act.upper.len() != dim {
                return Err(Error::Invalid(format!("actuator {j}: box must have {dim} coordinates")));
            }
            if act.lower.iter().zip(&act.upper).any(|(l, u)| !(l < u)) {
                return Err(Error::Invalid(format!("actuator {j}: empty support box")));
            }
            let col = mesh
                .sample(|p| {
                    let mut v = 1.0;
                    for d in 0..dim {
                        let (l, u) = (act.lower[d], act.upper[d]);
                        if p[d] < l - eps || p[d] > u + eps {
                            return 0.0;
                        }
                        if act.shape == ActuatorShape::Bump {
                            v *= (PI * ((p[d] - l) / (u - l) - 0.5)).cos().powi(2);
                        }
                    }
                    v
                })
                .into_vec();
            let norm = mesh.norm_l2(&col);
            if norm == 0.0 {
                return Err(Error::Invalid(format!("actuator {j}: support contains no mesh nodes")));
            }
            columns.push(col.into_iter().map(|v| v / norm).collect());
        }
        Ok(Self { columns })
    }

    /// Builds from raw columns, normalizing each in `L^2`.
    pub fn from_columns(mesh: &SpatialMesh, columns: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(columns.len());
        for c in columns {
            mesh.check(&c)?;
            let norm = mesh.norm_l2(&c);
            if norm == 0.0 {
                return Err(Error::Invalid("zero actuator column".into()));
            }
            out.push(c.into_iter().map(|v| v / norm).collect());
        }
        Ok(Self { columns: out })
    }

    pub fn actuator_count(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// `B u`
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.columns[0].len();
        let mut out = vec![0.0; n];
        self.apply_add(u, 1.0, &mut out);
        out
    }

    /// `out += s B u`
    pub fn apply_add(&self, u: &[f64], s: f64, out: &mut [f64]) {
        for (col, &uj) in self.columns.iter().zip(u) {
            if uj != 0.0 {
                for (o, c) in out.iter_mut().zip(col) {
                    *o += s * uj * c;
                }
            }
        }
    }

    /// `B^* y` with respect to the lumped `L^2` product.
    pub fn adjoint(&self, mesh: &SpatialMesh, y: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| mesh.dot(c, y)).collect()
    }
}

/// Closed ball `{ |v| <= eta }` in `R^m`; `eta = inf` disables the constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSet {
    eta: f64,
}

impl AdmissibleSet {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Invalid("admissible radius must be positive".into()));
        }
        Ok(Self { eta })
    }

    pub fn unconstrained() -> Self {
        Self { eta: f64::INFINITY }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_bounded(&self) -> bool {
        self.eta.is_finite()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        project_ball(self, v)
    }

    pub fn contains(&self, v: &[f64], slack: f64) -> bool {
        euclid(v) <= self.eta + slack
    }
}

pub fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Radial projection onto the closed ball; boundary points are kept.
pub fn project_ball(set: &AdmissibleSet, v: &[f64]) -> Vec<f64> {
    let n = euclid(v);
    if n <= set.eta {
        v.to_vec()
    } else {
        let mut out: Vec<f64> = v.iter().map(|x| set.eta * x / n).collect();
        // rounding can leave the scaled point an ulp outside the ball; pull
        // it in so that projecting again is the identity
        while euclid(&out) > set.eta {
            out.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative stationarity tolerance of the projected-gradient solver.
    pub optimizer: f64,
    /// Terminal-decay tolerance of the horizon truncation.
    pub tail: f64,
    /// Relative tolerance of iterative linear solves.
    pub linear: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { optimizer: 1e-8, tail: 1e-3, linear: 1e-12, max_iter: 2000 }
    }
}

/// Complete discretized stabilization problem on `(0, T)`.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    mesh: SpatialMesh,
    base_shift: f64,
    op: EllipticOperator,
    nonlinearity: Nonlinearity,
    control: ControlOperator,
    alpha: f64,
    admissible: AdmissibleSet,
    horizon: f64,
    dt: f64,
    steps: usize,
    y0: Field,
    tolerances: Tolerances,
}

pub struct ProblemSpecBuilder {
    mesh: SpatialMesh,
    base_shift: f64,
    nonlinearity: Nonlinearity,
    control: Option<ControlOperator>,
    alpha: f64,
    admissible: AdmissibleSet,
    horizon: f64,
    dt: f64,
    y0: Option<Field>,
    tolerances: Tolerances,
}

impl ProblemSpecBuilder {
    pub fn shift(mut self, c: f64) -> Self {
        self.base_shift = c;
        self
    }
    pub fn nonlinearity(mut self, nl: Nonlinearity) -> Self {
        self.nonlinearity = nl;
        self
    }
    pub fn control(mut self, b: ControlOperator) -> Self {
        self.control = Some(b);
        self
    }
    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
    pub fn admissible(mut self, set: AdmissibleSet) -> Self {
        self.admissible = set;
        self
    }
    pub fn horizon(mut self, t: f64, dt: f64) -> Self {
        self.horizon = t;
        self.dt = dt;
        self
    }
    pub fn y0(mut self, y0: Field) -> Self {
        self.y0 = Some(y0);
        self
    }
    pub fn tolerances(mut self, tol: Tolerances) -> Self {
        self.tolerances = tol;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        self.nonlinearity.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid("control weight alpha must be positive".into()));
        }
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid("horizon and time step must be positive".into()));
        }
        let ratio = self.horizon / self.dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Invalid(format!(
                "horizon T = {} is not an integer multiple of dt = {}",
                self.horizon, self.dt
            )));
        }
        if !self.base_shift.is_finite() {
            return Err(Error::Invalid("operator shift must be finite".into()));
        }
        let control = match self.control {
            Some(b) => b,
            None => ControlOperator::from_columns(&self.mesh, vec![vec![1.0; self.mesh.node_count()]])?,
        };
        if control.columns()[0].len() != self.mesh.node_count() {
            return Err(Error::MeshMismatch {
                expected: self.mesh.node_count(),
                found: control.columns()[0].len(),
            });
        }
        let y0 = self.y0.unwrap_or_else(|| Field::zeros(self.mesh.node_count()));
        self.mesh.check(&y0)?;
        if !y0.is_finite() {
            return Err(Error::Invalid("initial state must be finite".into()));
        }
        let op = assemble_operator(&self.mesh, self.base_shift + self.nonlinearity.linear_coefficient());
        Ok(ProblemSpec {
            mesh: self.mesh,
            base_shift: self.base_shift,
            op,
            nonlinearity: self.nonlinearity,
            control,
            alpha: self.alpha,
            admissible: self.admissible,
            horizon: self.horizon,
            dt: self.dt,
            steps: steps as usize,
            y0,
            tolerances: self.tolerances,
        })
    }
}

impl ProblemSpec {
    pub fn builder(mesh: SpatialMesh) -> ProblemSpecBuilder {
        ProblemSpecBuilder {
            mesh,
            base_shift: 0.0,
            nonlinearity: Nonlinearity::Zero,
            control: None,
            alpha: 1.0,
            admissible: AdmissibleSet::unconstrained(),
            horizon: 1.0,
            dt: 0.01,
            y0: None,
            tolerances: Tolerances::default(),
        }
    }

    pub fn mesh(&self) -> &SpatialMesh {
        &self.mesh
    }
    /// Operator `A_h` including the exported linear reaction coefficient.
    pub fn operator(&self) -> &EllipticOperator {
        &self.op
    }
    pub fn base_shift(&self) -> f64 {
        self.base_shift
    }
    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }
    pub fn control(&self) -> &ControlOperator {
        &self.control
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn admissible(&self) -> &AdmissibleSet {
        &self.admissible
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn y0(&self) -> &Field {
        &self.y0
    }
    pub fn tolerances(&self) -> &Tolerances {
        &self.tolerances
    }
    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }
    pub fn actuator_count(&self) -> usize {
        self.control.actuator_count()
    }

    pub fn with_y0(&self, y0: Field) -> Result<Self> {
        self.mesh.check(&y0)?;
        let mut s = self.clone();
        s.y0 = y0;
        Ok(s)
    }

    pub fn with_admissible(&self, set: AdmissibleSet) -> Self {
        let mut s = self.clone();
        s.admissible = set;
        s
    }

    pub fn with_tolerances(&self, tol: Tolerances) -> Self {
        let mut s = self.clone();
        s.tolerances = tol;
        s
    }

    /// Same problem on a shorter horizon of `steps` steps.
    pub fn with_steps(&self, steps: usize) -> Self {
        let mut s = self.clone();
        s.steps = steps;
        s.horizon = steps as f64 * self.dt;
        s
    }
}

/// One separable mode `prod_d phi_{k_d}(x_d)` with amplitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeTerm {
    pub k: Vec<usize>,
    pub amp: f64,
}

/// Eigenfunctions of the continuous Laplacian matching the boundary
/// condition: `cos(k pi x / L)` for Neumann, `sin(k pi x / L)` for Dirichlet.
pub fn mode_field(mesh: &SpatialMesh, terms: &[ModeTerm]) -> Field {
    let l = mesh.length();
    let bc = mesh.bc();
    let dim = mesh.dimension();
    mesh.sample(|p| {
        terms
            .iter()
            .map(|t| {
                let mut v = t.amp;
                for d in 0..dim {
                    let k = t.k.get(d).copied().unwrap_or(0) as f64;
                    v *= match bc {
                        BoundaryCondition::Neumann => (k * PI * p[d] / l).cos(),
                        BoundaryCondition::Dirichlet => {
                            let k = if t.k.get(d).copied().unwrap_or(0) == 0 { 1.0 } else { k };
                            (k * PI * p[d] / l).sin()
                        }
                    };
                }
                v
            })
            .sum()
    })
}

/// Random smooth field from the first `modes` eigenfunctions per axis, with
/// coefficients decaying like `1/(1+k)^2`, normalized to unit `H^1` norm.
pub fn random_smooth_field<R: Rng + ?Sized>(mesh: &SpatialMesh, rng: &mut R, modes: usize) -> Field {
    let dim = mesh.dimension();
    let mut terms = Vec::new();
    let first = if mesh.bc() == BoundaryCondition::Dirichlet { 1 } else { 0 };
    let ks: Vec<usize> = (first..first + modes.max(1)).collect();
    if dim == 1 {
        for &k in &ks {
            let amp: f64 = rng.gen_range(-1.0..1.0) / (1.0 + k as f64).powi(2);
            terms.push(ModeTerm { k: vec![k], amp });
        }
    } else {
        for &kx in &ks {
            for &ky in &ks {
                let amp: f64 = rng.gen_range(-1.0..1.0) / (1.0 + (kx + ky) as f64).powi(2);
                terms.push(ModeTerm { k: vec![kx, ky], amp });
            }
        }
    }
    let f = mode_field(mesh, &terms);
    let n = mesh.norm_h1(&f);
    if n == 0.0 {
        return random_smooth_field(mesh, rng, modes);
    }
    f.scaled(1.0 / n)
}
