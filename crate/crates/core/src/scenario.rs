//! Scenario aggregate: atlas, field system, loops and homology declarations.
//!
//! Scenarios are what the CLI loads from JSON (schema in `docs/schema.md`)
//! and what the built-in constructions produce. A scenario is immutable once
//! validated; all analyses borrow it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{Atlas, Dimensions, Loop};
use crate::expr::Expression;
use crate::fields::FieldSystem;
use crate::num::Real;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("{path}: {detail}")]
    Invalid { path: String, detail: String },
    #[error("scenario JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
}

fn invalid(path: impl Into<String>, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Scenario<R: Real> {
    pub name: String,
    pub dims: Dimensions,
    /// Fiber coordinate names shared by every chart: the s phase names first,
    /// then the q parameter names.
    pub fiber_vars: Vec<String>,
    /// Half-width of the admissible fiber box: lifts must keep |w_i| below it.
    pub fiber_box: R,
    pub atlas: Atlas<R>,
    pub fields: FieldSystem<R>,
    #[serde(default)]
    pub loops: Vec<Loop<R>>,
    /// Labels of the loops the user asserts generate the homology.
    #[serde(default)]
    pub homology_generators: Vec<String>,
    /// Region (chart) a cycle is responsible for in the gluing procedure.
    /// Generators without an assigned region are checked as extra loops.
    #[serde(default)]
    pub cycle_regions: BTreeMap<String, String>,
    /// Pairs of generators the user declares as geometrically intersecting.
    #[serde(default)]
    pub intersecting_pairs: Vec<(String, String)>,
    /// User assertion that the base manifold is simply connected; short-
    /// circuits the whole monodromy analysis.
    #[serde(default)]
    pub trivial_pi1: bool,
}

impl<R: Real> Scenario<R> {
    pub fn loop_by_label(&self, label: &str) -> Result<&Loop<R>, ScenarioError> {
        self.loops
            .iter()
            .find(|l| l.label == label)
            .ok_or_else(|| invalid(format!("loops[{label}]"), "no loop with this label"))
    }

    /// Structural validation; sampled numerical checks live in
    /// [`crate::fields::hypothesis_suite`].
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let k = self.dims.base;
        if k < 1 {
            return Err(invalid("dims.base", "base dimension must be at least 1"));
        }
        if self.dims.fiber < 1 {
            return Err(invalid("dims.fiber", "fiber dimension must be at least 1"));
        }
        if self.fiber_vars.len() != self.dims.transverse() {
            return Err(invalid(
                "fiber_vars",
                format!(
                    "expected {} names (fiber + parameter), got {}",
                    self.dims.transverse(),
                    self.fiber_vars.len()
                ),
            ));
        }
        if self.fiber_box <= R::zero() {
            return Err(invalid("fiber_box", "must be positive"));
        }
        if self.atlas.charts.is_empty() {
            return Err(invalid("charts", "at least one chart is required"));
        }

        let mut ids = BTreeSet::new();
        for (ci, chart) in self.atlas.charts.iter().enumerate() {
            let path = format!("charts[{}]", chart.id);
            if !ids.insert(chart.id.clone()) {
                return Err(invalid(path, "duplicate chart id"));
            }
            if chart.base_vars.len() != k {
                return Err(invalid(
                    format!("{path}.base_vars"),
                    format!("expected {k} base variables"),
                ));
            }
            if chart.intervals.len() != k {
                return Err(invalid(
                    format!("{path}.intervals"),
                    "one interval per base variable",
                ));
            }
            if !chart.periods.is_empty() && chart.periods.len() != k {
                return Err(invalid(
                    format!("{path}.periods"),
                    "either empty or one entry per base variable",
                ));
            }
            for (lo, hi) in &chart.intervals {
                if !(lo < hi) {
                    return Err(invalid(format!("{path}.intervals"), "need lo < hi"));
                }
            }
            let mut names: BTreeSet<&str> =
                chart.base_vars.iter().map(String::as_str).collect();
            if names.len() != k {
                return Err(invalid(
                    format!("{path}.base_vars"),
                    "variable names must be unique",
                ));
            }
            for fv in &self.fiber_vars {
                if !names.insert(fv) {
                    return Err(invalid(
                        format!("{path}.base_vars"),
                        format!("`{fv}` collides with a fiber variable"),
                    ));
                }
            }
            if let Some(pred) = &chart.predicate {
                self.check_vars(pred, &chart.base_vars, &format!("{path}.predicate"))?;
            }
            for (si, sample) in chart.samples.iter().enumerate() {
                if sample.len() != k {
                    return Err(invalid(
                        format!("{path}.samples[{si}]"),
                        "wrong coordinate count",
                    ));
                }
                let inside = chart
                    .contains(sample)
                    .map_err(|e| invalid(format!("{path}.samples[{si}]"), e.to_string()))?;
                if !inside {
                    return Err(invalid(
                        format!("{path}.samples[{si}]"),
                        "declared sample point lies outside the chart domain",
                    ));
                }
            }
            let _ = ci;
        }

        for (ti, tm) in self.atlas.transitions.iter().enumerate() {
            let path = format!("transitions[{ti}] ({} -> {})", tm.from, tm.to);
            let from = self
                .atlas
                .chart(&tm.from)
                .map_err(|e| invalid(&path, e.to_string()))?;
            let to = self
                .atlas
                .chart(&tm.to)
                .map_err(|e| invalid(&path, e.to_string()))?;
            if tm.forward.len() != to.dim() || tm.backward.len() != from.dim() {
                return Err(invalid(&path, "forward/backward component count mismatch"));
            }
            for f in &tm.forward {
                self.check_vars(f, &from.base_vars, &format!("{path}.forward"))?;
            }
            for b in &tm.backward {
                self.check_vars(b, &to.base_vars, &format!("{path}.backward"))?;
            }
            self.check_vars(&tm.overlap, &from.base_vars, &format!("{path}.overlap"))?;
        }

        self.fields
            .validate(&self.atlas, &self.dims, &self.fiber_vars)?;

        let mut labels = BTreeSet::new();
        for lp in &self.loops {
            let path = format!("loops[{}]", lp.label);
            if !labels.insert(lp.label.clone()) {
                return Err(invalid(path, "duplicate loop label"));
            }
            let base = self
                .atlas
                .chart(&lp.base_chart)
                .map_err(|e| invalid(&path, e.to_string()))?;
            if lp.base_point.len() != base.dim() {
                return Err(invalid(format!("{path}.base_point"), "wrong dimension"));
            }
            for (si, seg) in lp.segments.iter().enumerate() {
                let chart = self
                    .atlas
                    .chart(&seg.chart)
                    .map_err(|e| invalid(format!("{path}.segments[{si}]"), e.to_string()))?;
                if seg.path.len() != chart.dim() {
                    return Err(invalid(
                        format!("{path}.segments[{si}].path"),
                        "one expression per base coordinate",
                    ));
                }
                if !(seg.t0 < seg.t1) {
                    return Err(invalid(
                        format!("{path}.segments[{si}]"),
                        "need t0 < t1",
                    ));
                }
                for p in &seg.path {
                    for v in p.free_vars() {
                        if v != "t" {
                            return Err(invalid(
                                format!("{path}.segments[{si}].path"),
                                format!("path expressions may only use `t`, found `{v}`"),
                            ));
                        }
                    }
                }
            }
            lp.validate(&self.atlas)
                .map_err(|e| invalid(&path, e.to_string()))?;
        }

        for label in &self.homology_generators {
            if !labels.contains(label) {
                return Err(invalid(
                    "homology_generators",
                    format!("unknown loop `{label}`"),
                ));
            }
        }
        for (cycle, region) in &self.cycle_regions {
            if !self.homology_generators.contains(cycle) {
                return Err(invalid(
                    "cycle_regions",
                    format!("`{cycle}` is not a homology generator"),
                ));
            }
            self.atlas
                .chart(region)
                .map_err(|e| invalid("cycle_regions", e.to_string()))?;
        }
        for (a, b) in &self.intersecting_pairs {
            for label in [a, b] {
                if !self.homology_generators.contains(label) {
                    return Err(invalid(
                        "intersecting_pairs",
                        format!("`{label}` is not a homology generator"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_vars(
        &self,
        expr: &Expression<R>,
        allowed: &[String],
        path: &str,
    ) -> Result<(), ScenarioError> {
        for v in expr.free_vars() {
            if !allowed.iter().any(|a| a == v) {
                return Err(invalid(
                    path,
                    format!("variable `{v}` is not a coordinate of this chart"),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String
    where
        R: Serialize,
    {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError>
    where
        R: serde::de::DeserializeOwned,
    {
        let scn: Scenario<R> = serde_json::from_str(text).map_err(|e| {
            ScenarioError::Json(format!(
                "{e} (line {}, column {})",
                e.line(),
                e.column()
            ))
        })?;
        scn.validate()?;
        Ok(scn)
    }
}
