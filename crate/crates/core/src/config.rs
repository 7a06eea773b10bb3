//! JSON experiment configuration: schema, validation and the mapping to a
//! [`ProblemSpec`].
//!
//! Parse and schema errors carry a JSON pointer to the offending value and
//! the line of the file where parsing stopped; semantic errors carry the
//! pointer alone.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryCondition, Field, SpatialMesh};
use crate::model::{
    mode_field, random_smooth_field, Actuator, AdmissibleSet, ControlOperator, ModeTerm, Nonlinearity, ProblemSpec,
    Tolerances,
};
use crate::optimize::Coordinates;

/// Nodes at or above this count are refused unless the override is set.
pub const MAX_NODES: usize = 200_000;
/// Time steps at or above this count are refused unless the override is set.
pub const MAX_STEPS: usize = 100_000;
/// Setting this variable to `1` lifts the desk-scale caps.
pub const CAP_OVERRIDE_VAR: &str = "PARASTAB_CAP_OVERRIDE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub grid: GridBlock,
    pub control: ControlBlock,
    pub cost: CostBlock,
    pub horizon: HorizonBlock,
    pub initial: InitialBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub reaction: Nonlinearity,
    /// Constant `c` of `A = Laplacian - c`.
    #[serde(default)]
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub dimension: usize,
    /// Nodes per axis.
    pub n: usize,
    pub bc: BoundaryCondition,
    #[serde(default = "unit")]
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    pub m: usize,
    pub actuators: Vec<Actuator>,
    /// Radius of the admissible ball; `null` for no constraint.
    pub eta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonBlock {
    pub t: f64,
    pub dt: f64,
    #[serde(default = "default_tail")]
    pub tail_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    /// Sum of Laplacian eigenfunctions matching the boundary condition.
    pub modes: Vec<ModeTerm>,
    /// Rescales the field to this `H^1` norm.
    #[serde(default)]
    pub h1_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartPolicy {
    Feedback,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: WarmStartPolicy,
    pub linear_tol: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let t = Tolerances::default();
        Self { tol: t.optimizer, max_iter: t.max_iter, warm_start: WarmStartPolicy::Feedback, linear_tol: t.linear }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub tag: String,
    #[serde(default)]
    pub grad_check: GradCheckBlock,
    #[serde(default)]
    pub hjb: HjbBlock,
    #[serde(default)]
    pub lipschitz: LipschitzBlock,
    #[serde(default)]
    pub second_order: SecondOrderBlock,
    #[serde(default)]
    pub feedback: FeedbackBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub stabilize: StabilizeBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckBlock {
    /// Random smooth directions drawn from the seed.
    pub random_directions: usize,
    /// Explicit directions, each a mode sum; must not vanish.
    pub directions: Vec<Vec<ModeTerm>>,
    pub eps: Vec<f64>,
    pub max_rel_error: f64,
    pub ratio: [f64; 2],
    pub relative_step: bool,
    /// Probe solve tolerance; the solver tolerance when absent.
    pub tol: Option<f64>,
}

impl Default for GradCheckBlock {
    fn default() -> Self {
        Self {
            random_directions: 3,
            directions: Vec::new(),
            eps: vec![1e-2, 1e-3],
            max_rel_error: 1e-3,
            ratio: [50.0, 200.0],
            relative_step: true,
            tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbBlock {
    /// States sampled at equal spacing along the optimal trajectory.
    pub states: usize,
    /// Fraction of the horizon the samples cover.
    pub span: f64,
}

impl Default for HjbBlock {
    fn default() -> Self {
        Self { states: 10, span: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzBlock {
    pub pairs: usize,
    pub eps: Vec<f64>,
    pub max_spread: f64,
    pub tol: Option<f64>,
}

impl Default for LipschitzBlock {
    fn default() -> Self {
        Self { pairs: 8, eps: vec![1e-2, 1e-3], max_spread: 2.0, tol: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondOrderBlock {
    pub krylov_dim: usize,
    pub coordinates: Coordinates,
    /// `H^1` norms of rescaled data for the curvature trend; empty skips it.
    pub trend: Vec<f64>,
}

impl Default for SecondOrderBlock {
    fn default() -> Self {
        Self { krylov_dim: 20, coordinates: Coordinates::Feedback, trend: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackBlock {
    /// Steps applied between receding-horizon re-solves; absent means a
    /// tenth of the horizon.
    pub resolve_every: Option<usize>,
    pub certificate_samples: usize,
    pub max_gap: f64,
    /// Random feasible controls the optimal value must undercut.
    pub dp_probes: usize,
}

impl Default for FeedbackBlock {
    fn default() -> Self {
        Self { resolve_every: None, certificate_samples: 8, max_gap: 0.05, dp_probes: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleBlock {
    /// Random initial states compared, besides the configured one.
    pub instances: usize,
    pub restarts: usize,
    pub max_rel_gap: f64,
}

impl Default for OracleBlock {
    fn default() -> Self {
        Self { instances: 10, restarts: 3, max_rel_gap: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizeBlock {
    pub samples: usize,
    pub trials: usize,
    /// Largest mesh solved densely for the Riccati gain.
    pub dense_cap: usize,
}

impl Default for StabilizeBlock {
    fn default() -> Self {
        Self { samples: 8, trials: 20, dense_cap: crate::stabilize::DEFAULT_DENSE_CAP }
    }
}

fn unit() -> f64 {
    1.0
}

fn default_tail() -> f64 {
    Tolerances::default().tail
}

/// Sizes implied by a validated config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedSizes {
    pub nodes: usize,
    pub steps: usize,
    pub actuators: usize,
    pub control_unknowns: usize,
    /// Rough peak bytes of one solve: a handful of state trajectories plus
    /// the dense Riccati workspace.
    pub memory_bytes: usize,
}

fn err(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config { pointer: pointer.into(), message: message.into() }
}

fn finite_positive(pointer: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(err(pointer, format!("must be finite and positive, got {v}")))
    }
}

fn caps_lifted() -> bool {
    std::env::var(CAP_OVERRIDE_VAR).map_or(false, |v| v == "1")
}

/// `serde_path_to_error` paths as JSON pointers.
fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(e.path());
            let inner = e.into_inner();
            err(&pointer, format!("line {}, column {}: {inner}", inner.line(), inner.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialization of the parsed config.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mesh(&self) -> Result<SpatialMesh> {
        let g = &self.grid;
        SpatialMesh::new(g.dimension, g.n, g.length, g.bc).map_err(|e| err("/grid", e.to_string()))
    }

    pub fn admissible(&self) -> Result<AdmissibleSet> {
        match self.control.eta {
            None => Ok(AdmissibleSet::unconstrained()),
            Some(eta) if eta > 0.0 && eta.is_finite() => AdmissibleSet::new(eta).map_err(|e| err("/control/eta", e.to_string())),
            Some(eta) if eta > 0.0 => Ok(AdmissibleSet::unconstrained()),
            Some(_) => Err(err("/control/eta", "admissible radius must be positive")),
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            optimizer: self.solver.tol,
            tail: self.horizon.tail_tol,
            linear: self.solver.linear_tol,
            max_iter: self.solver.max_iter,
        }
    }

    /// The initial state of the config: its mode sum, rescaled when a norm
    /// is given.
    pub fn initial_state(&self, mesh: &SpatialMesh) -> Result<Field> {
        let f = mode_field(mesh, &self.initial.modes);
        match self.initial.h1_norm {
            None => Ok(f),
            Some(target) => {
                let n = mesh.norm_h1(&f);
                if n == 0.0 {
                    if target == 0.0 {
                        return Ok(f);
                    }
                    return Err(err("/initial/modes", "mode sum vanishes on the mesh and cannot be rescaled"));
                }
                Ok(f.scaled(target / n))
            }
        }
    }

    pub fn to_spec(&self) -> Result<ProblemSpec> {
        let mesh = self.mesh()?;
        let b = ControlOperator::from_actuators(&mesh, &self.control.actuators)
            .map_err(|e| err("/control/actuators", e.to_string()))?;
        let y0 = self.initial_state(&mesh)?;
        ProblemSpec::builder(mesh)
            .shift(self.model.shift)
            .nonlinearity(self.model.reaction.clone())
            .control(b)
            .alpha(self.cost.alpha)
            .admissible(self.admissible()?)
            .horizon(self.horizon.t, self.horizon.dt)
            .y0(y0)
            .tolerances(self.tolerances())
            .build()
    }

    /// Grad-check directions: the explicit ones, then the random ones.
    pub fn grad_directions(&self, mesh: &SpatialMesh) -> Vec<Field> {
        let gc = &self.experiment.grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut dirs: Vec<Field> = gc.directions.iter().map(|d| mode_field(mesh, d)).collect();
        dirs.extend((0..gc.random_directions).map(|_| random_smooth_field(mesh, &mut rng, 4)));
        dirs
    }

    pub fn derived(&self) -> DerivedSizes {
        let per_axis = self.grid.n;
        let nodes = per_axis.pow(self.grid.dimension as u32);
        let steps = (self.horizon.t / self.horizon.dt).round() as usize;
        let m = self.control.actuators.len();
        let dense = nodes.min(self.experiment.stabilize.dense_cap);
        let memory_bytes = 8 * (8 * (steps + 1) * nodes + 4 * (steps + 1) * m + 12 * dense * dense + 2 * dense * m);
        DerivedSizes { nodes, steps, actuators: m, control_unknowns: steps * m, memory_bytes }
    }

    /// Schema-level range checks; [`ExperimentConfig::to_spec`] repeats the
    /// ones that need the mesh.
    pub fn validate(&self) -> Result<()> {
        if let Err(e) = self.model.reaction.validate() {
            return Err(err("/model/reaction", e.to_string()));
        }
        if !self.model.shift.is_finite() {
            return Err(err("/model/shift", "must be finite"));
        }
        let g = &self.grid;
        if !(1..=2).contains(&g.dimension) {
            return Err(err("/grid/dimension", format!("must be 1 or 2, got {}", g.dimension)));
        }
        if g.n < 3 {
            return Err(err("/grid/n", format!("at least 3 nodes per axis are required, got {}", g.n)));
        }
        finite_positive("/grid/length", g.length)?;

        let c = &self.control;
        if c.actuators.is_empty() {
            return Err(err("/control/actuators", "at least one actuator is required"));
        }
        if c.m != c.actuators.len() {
            return Err(err("/control/m", format!("m = {} but {} actuators are listed", c.m, c.actuators.len())));
        }
        for (j, a) in c.actuators.iter().enumerate() {
            let p = format!("/control/actuators/{j}");
            if a.lower.len() != g.dimension || a.upper.len() != g.dimension {
                return Err(err(&p, format!("support box needs {} coordinates per corner", g.dimension)));
            }
            for d in 0..g.dimension {
                let (l, u) = (a.lower[d], a.upper[d]);
                if !(l.is_finite() && u.is_finite() && l < u && l >= 0.0 && u <= g.length) {
                    return Err(err(&p, format!("support [{l}, {u}] must be a nonempty subinterval of [0, {}]", g.length)));
                }
            }
        }
        if let Some(eta) = c.eta {
            if eta.is_nan() || eta <= 0.0 {
                return Err(err("/control/eta", "admissible radius must be positive"));
            }
        }
        finite_positive("/cost/alpha", self.cost.alpha)?;

        let h = &self.horizon;
        finite_positive("/horizon/t", h.t)?;
        finite_positive("/horizon/dt", h.dt)?;
        let ratio = h.t / h.dt;
        if ratio.round() < 1.0 || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(err(
                "/horizon/dt",
                format!("horizon.dt = {} does not divide horizon.t = {}", h.dt, h.t),
            ));
        }
        if !(h.tail_tol > 0.0 && h.tail_tol < 1.0) {
            return Err(err("/horizon/tail_tol", "must lie in (0, 1)"));
        }

        for (i, t) in self.initial.modes.iter().enumerate() {
            if !t.amp.is_finite() {
                return Err(err(&format!("/initial/modes/{i}/amp"), "must be finite"));
            }
            if t.k.len() > g.dimension {
                return Err(err(&format!("/initial/modes/{i}/k"), format!("at most {} indices", g.dimension)));
            }
        }
        if let Some(n) = self.initial.h1_norm {
            if !(n.is_finite() && n >= 0.0) {
                return Err(err("/initial/h1_norm", "must be finite and nonnegative"));
            }
        }

        let s = &self.solver;
        if !(s.tol > 0.0 && s.tol < 1.0) {
            return Err(err("/solver/tol", "must lie in (0, 1)"));
        }
        if !(s.linear_tol > 0.0 && s.linear_tol < 1.0) {
            return Err(err("/solver/linear_tol", "must lie in (0, 1)"));
        }
        if s.max_iter == 0 {
            return Err(err("/solver/max_iter", "must be at least 1"));
        }

        self.validate_experiment()?;

        let sizes = self.derived();
        if !caps_lifted() {
            if sizes.nodes >= MAX_NODES {
                return Err(err("/grid/n", format!(
                    "{} nodes exceed the desk-scale cap of {MAX_NODES}; set {CAP_OVERRIDE_VAR}=1 to run anyway (unsupported)",
                    sizes.nodes
                )));
            }
            if sizes.steps >= MAX_STEPS {
                return Err(err("/horizon/dt", format!(
                    "{} time steps exceed the desk-scale cap of {MAX_STEPS}; set {CAP_OVERRIDE_VAR}=1 to run anyway (unsupported)",
                    sizes.steps
                )));
            }
        }
        // mesh-level checks, e.g. actuator supports without nodes
        self.to_spec().map(|_| ())
    }

    fn validate_experiment(&self) -> Result<()> {
        let e = &self.experiment;
        if e.tag.is_empty() || !e.tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(err("/experiment/tag", "must be a nonempty name of letters, digits, '_' or '-'"));
        }
        let gc = &e.grad_check;
        check_steps("/experiment/grad_check/eps", &gc.eps)?;
        finite_positive("/experiment/grad_check/max_rel_error", gc.max_rel_error)?;
        if !(gc.ratio[0] > 0.0 && gc.ratio[0] <= gc.ratio[1] && gc.ratio[1].is_finite()) {
            return Err(err("/experiment/grad_check/ratio", "must be an increasing pair of positive bounds"));
        }
        if let Some(t) = gc.tol {
            finite_positive("/experiment/grad_check/tol", t)?;
        }
        if !gc.directions.is_empty() {
            let mesh = self.mesh()?;
            for (i, d) in gc.directions.iter().enumerate() {
                let f = mode_field(&mesh, d);
                if mesh.norm_h1(&f) == 0.0 {
                    return Err(err(
                        &format!("/experiment/grad_check/directions/{i}"),
                        "zero direction: the difference quotient is undefined",
                    ));
                }
            }
        }
        if !(e.hjb.span > 0.0 && e.hjb.span <= 1.0) {
            return Err(err("/experiment/hjb/span", "must lie in (0, 1]"));
        }
        check_steps("/experiment/lipschitz/eps", &e.lipschitz.eps)?;
        if e.lipschitz.pairs == 0 {
            return Err(err("/experiment/lipschitz/pairs", "must be at least 1"));
        }
        if !(e.lipschitz.max_spread >= 1.0) {
            return Err(err("/experiment/lipschitz/max_spread", "must be at least 1"));
        }
        if let Some(t) = e.lipschitz.tol {
            finite_positive("/experiment/lipschitz/tol", t)?;
        }
        if e.second_order.krylov_dim == 0 {
            return Err(err("/experiment/second_order/krylov_dim", "must be at least 1"));
        }
        for (i, n) in e.second_order.trend.iter().enumerate() {
            finite_positive(&format!("/experiment/second_order/trend/{i}"), *n)?;
        }
        if e.feedback.resolve_every == Some(0) {
            return Err(err("/experiment/feedback/resolve_every", "must be at least 1"));
        }
        finite_positive("/experiment/feedback/max_gap", e.feedback.max_gap)?;
        finite_positive("/experiment/oracle/max_rel_gap", e.oracle.max_rel_gap)?;
        if e.stabilize.dense_cap < 2 {
            return Err(err("/experiment/stabilize/dense_cap", "must be at least 2"));
        }
        Ok(())
    }
}

fn check_steps(pointer: &str, eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(err(pointer, "at least one step is required"));
    }
    for (i, e) in eps.iter().enumerate() {
        finite_positive(&format!("{pointer}/{i}"), *e)?;
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(err(pointer, "steps must be strictly decreasing"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "model": { "reaction": { "kind": "schlogl", "a": -1.0, "xi1": -1.0, "xi2": 2.0 } },
        "grid": { "dimension": 1, "n": 16, "bc": "neumann" },
        "control": { "m": 1, "actuators": [ { "lower": [0.0], "upper": [0.5] } ], "eta": 0.5 },
        "cost": { "alpha": 0.1 },
        "horizon": { "t": 2.0, "dt": 0.05 },
        "initial": { "modes": [ { "k": [0], "amp": 1.0 }, { "k": [1], "amp": 0.5 } ], "h1_norm": 0.05 },
        "experiment": { "tag": "unit" },
        "seed": 3
    }"#;

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        f(&mut v);
        v.to_string()
    }

    fn pointer(e: Error) -> (String, String) {
        match e {
            Error::Config { pointer, message } => (pointer, message),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn base_parses_and_builds() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        let s = c.to_spec().unwrap();
        assert_eq!(s.steps(), 40);
        assert!((s.mesh().norm_h1(s.y0()) - 0.05).abs() < 1e-14);
        assert_eq!(c.derived().nodes, 16);
    }

    #[test]
    fn round_trip_is_identity() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.fingerprint(), back.fingerprint());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_pointer() {
        let text = edit(|v| {
            v["cost"]["beta"] = 1.0.into();
        });
        let (p, msg) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
        assert_eq!(p, "/cost/beta");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn nonpositive_radius() {
        for eta in [0.0, -1.0] {
            let text = edit(|v| v["control"]["eta"] = eta.into());
            let (p, msg) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
            assert_eq!(p, "/control/eta");
            assert_eq!(msg, "admissible radius must be positive");
        }
        let text = edit(|v| v["control"]["eta"] = serde_json::Value::Null);
        assert!(!ExperimentConfig::from_json(&text).unwrap().admissible().unwrap().is_bounded());
    }

    #[test]
    fn step_must_divide_horizon() {
        let text = edit(|v| v["horizon"]["dt"] = 0.3.into());
        let (_, msg) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
        assert!(msg.contains("horizon.dt") && msg.contains("horizon.t"), "{msg}");
    }

    #[test]
    fn zero_direction_is_rejected() {
        let text = edit(|v| {
            v["experiment"]["grad_check"] = serde_json::json!({ "directions": [[{ "k": [1], "amp": 0.0 }]] });
        });
        let (p, _) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
        assert_eq!(p, "/experiment/grad_check/directions/0");
    }

    #[test]
    fn step_cap() {
        let text = edit(|v| {
            v["horizon"]["t"] = 1000.0.into();
            v["horizon"]["dt"] = 0.001.into();
        });
        let (p, msg) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
        assert_eq!(p, "/horizon/dt");
        assert!(msg.contains(CAP_OVERRIDE_VAR));
    }

    #[test]
    fn m_must_match_actuators() {
        let text = edit(|v| v["control"]["m"] = 2.into());
        let (p, _) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
        assert_eq!(p, "/control/m");
    }

    #[test]
    fn parse_errors_point_into_nested_values() {
        let text = edit(|v| v["model"]["reaction"]["kind"] = "cubic".into());
        let (p, _) = pointer(ExperimentConfig::from_json(&text).unwrap_err());
        assert!(p.starts_with("/model/reaction"), "{p}");
    }
}
