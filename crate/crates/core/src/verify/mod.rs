//! Numerical checks of the value-function identities on discretized
//! problems, and the reports they produce.
//!
//! Every probe that needs its own optimal control solve is independent, so
//! probes fan out with rayon; results are collected in probe order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::ProblemSpec;

mod feedback;
mod gradient;
mod oracle;
mod stability;

pub use feedback::{feedback_closed_loop, fixed_point_certificate, inactivity_time, FeedbackReport};
pub use gradient::{
    gradient_fd_check, hjb_residual, hjb_terms, value_gradient, GradCheckOptions, HjbTerms, ValueGradient,
};
pub use oracle::{brute_force_value, dp_consistency, OracleResult};
pub use stability::{
    curvature_trend, hessian_vector, lipschitz_probe, second_order_check, LipschitzOptions, SecondOrderReport,
};

/// One pass/fail judgement and the tolerance it was judged against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// Human-readable acceptance rule, e.g. `<= 1e-3` or `in [50, 200]`.
    pub rule: String,
}

impl Verdict {
    pub fn at_most(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { name: name.into(), passed: value <= tol, value, rule: format!("<= {tol:e}") }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value >= bound, value, rule: format!(">= {bound:e}") }
    }

    pub fn greater(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value > bound, value, rule: format!("> {bound:e}") }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), passed: value >= lo && value <= hi, value, rule: format!("in [{lo}, {hi}]") }
    }

    pub fn holds(name: impl Into<String>, passed: bool) -> Self {
        Self { name: name.into(), passed, value: if passed { 1.0 } else { 0.0 }, rule: "holds".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub warm_start: String,
    pub seed: Option<u64>,
    pub dimension: usize,
    pub nodes_per_axis: usize,
    pub nodes: usize,
    pub dt: f64,
    pub steps: usize,
}

impl Provenance {
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        let mesh = spec.mesh();
        Self {
            warm_start: String::new(),
            seed: None,
            dimension: mesh.dimension(),
            nodes_per_axis: mesh.nodes_per_axis(),
            nodes: mesh.node_count(),
            dt: spec.dt(),
            steps: spec.steps(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tag: String,
    pub experiment: String,
    /// SHA-256 of the canonical config, when run from one.
    pub fingerprint: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub tables: BTreeMap<String, Table>,
    pub notes: Vec<String>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    pub fn new(experiment: &str, spec: &ProblemSpec) -> Self {
        Self { experiment: experiment.into(), provenance: Provenance::from_spec(spec), ..Self::default() }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn verdict(&mut self, v: Verdict) {
        self.verdicts.push(v);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// Folds another report's verdicts, metrics and tables in under a prefix.
    pub fn absorb(&mut self, prefix: &str, other: ExperimentReport) {
        for (k, v) in other.metrics {
            self.metrics.insert(format!("{prefix}.{k}"), v);
        }
        for mut v in other.verdicts {
            v.name = format!("{prefix}.{}", v.name);
            self.verdicts.push(v);
        }
        for (k, t) in other.tables {
            self.tables.insert(format!("{prefix}.{k}"), t);
        }
        self.notes.extend(other.notes.into_iter().map(|n| format!("{prefix}: {n}")));
    }

    /// Aligned plain-text summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} [{}]", self.experiment, self.tag);
        let width = self
            .metrics
            .keys()
            .chain(self.verdicts.iter().map(|v| &v.name))
            .map(|k| k.len())
            .max()
            .unwrap_or(0);
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "  {k:<width$}  {v:.6e}");
        }
        for v in &self.verdicts {
            let mark = if v.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "  {:<width$}  {mark}  {:.6e} ({})", v.name, v.value, v.rule);
        }
        for n in &self.notes {
            let _ = writeln!(out, "  note: {n}");
        }
        out
    }
}
