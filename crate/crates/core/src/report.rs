//! Report serialization: JSON (schema in `docs/report_schema.md`) and the
//! fixed-layout text summary. Field order and float formatting are
//! deterministic, so identical runs produce byte-identical reports.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::atlas::Dimensions;
use crate::fields::HypothesisReport;
use crate::num::{Numeric, Real};
use crate::persistence::{
    PersistenceReport, SpectrumOutcome, SpectrumTest, Verdict,
};
use crate::transport::MonodromyResult;

pub const SCHEMA_VERSION: u32 = 1;

/// Row-major dense matrix payload.
#[derive(Clone, Debug, Serialize)]
pub struct MatrixRepr<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> MatrixRepr<R> {
    pub fn from_matrix(m: &DMatrix<R>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

fn pairs<R: Real>(zs: &[Complex<R>]) -> Vec<(R, R)> {
    zs.iter().map(|z| (z.re, z.im)).collect()
}

#[derive(Clone, Debug, Serialize)]
#[serde(bound(serialize = "R: Serialize"))]
pub struct MonodromyReport<R: Real> {
    pub schema_version: u32,
    pub loop_label: String,
    pub dims: Dimensions,
    pub integrator_step: R,
    pub m: MatrixRepr<R>,
    pub m0: MatrixRepr<R>,
    pub m1: MatrixRepr<R>,
    pub multipliers: Vec<(R, R)>,
    pub restricted_multipliers: Vec<(R, R)>,
    pub restricted_exponents: Vec<(R, R)>,
}

impl<R: Real> MonodromyReport<R> {
    pub fn new(m: &MonodromyResult<R>) -> Self {
        MonodromyReport {
            schema_version: SCHEMA_VERSION,
            loop_label: m.loop_label.clone(),
            dims: m.dims,
            integrator_step: m.integrator_step,
            m: MatrixRepr::from_matrix(&m.m),
            m0: MatrixRepr::from_matrix(&m.m0),
            m1: MatrixRepr::from_matrix(&m.m1),
            multipliers: pairs(&m.multipliers),
            restricted_multipliers: pairs(&m.restricted_multipliers),
            restricted_exponents: pairs(&m.restricted_exponents),
        }
    }

    pub fn to_json(&self) -> String
    where
        R: Serialize,
    {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(bound(serialize = "R: Serialize"))]
pub struct CycleReportJson<R: Real> {
    pub label: String,
    pub monodromy: MonodromyReport<R>,
    pub identity: bool,
    pub section: Option<MatrixRepr<R>>,
    pub section_degenerate: Option<String>,
    pub min_multiplier_distance: R,
}

#[derive(Clone, Debug, Serialize)]
#[serde(bound(serialize = "R: Serialize"))]
pub struct KernelPairJson<R: Real> {
    pub cycle_a: String,
    pub cycle_b: String,
    pub kernel_dimension: Option<usize>,
    pub kernel_basis: Vec<MatrixRepr<R>>,
    pub contains_section: Option<bool>,
    pub max_candidate_residual: Option<R>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(bound(serialize = "R: Serialize"))]
pub struct PersistenceReportJson<R: Real> {
    pub schema_version: u32,
    pub scenario: String,
    pub verdict: Verdict,
    pub corollary1_applied: bool,
    pub hypothesis: Option<HypothesisReport<R>>,
    pub per_cycle: Vec<CycleReportJson<R>>,
    pub spectrum: Option<SpectrumTest<R>>,
    pub spectrum_labels: Vec<String>,
    pub kernel_tests: Vec<KernelPairJson<R>>,
    pub compatibility: Vec<crate::persistence::OverlapDiscrepancy<R>>,
    pub section_checks: Vec<crate::persistence::SectionFixCheck<R>>,
    pub notes: Vec<String>,
    pub config: crate::persistence::AnalysisConfig<R>,
}

impl<R: Real> PersistenceReportJson<R> {
    pub fn new(report: &PersistenceReport<R>) -> Self {
        PersistenceReportJson {
            schema_version: SCHEMA_VERSION,
            scenario: report.scenario.clone(),
            verdict: report.verdict,
            corollary1_applied: report.corollary1_applied,
            hypothesis: report.hypothesis.clone(),
            per_cycle: report
                .per_cycle
                .iter()
                .map(|c| CycleReportJson {
                    label: c.label.clone(),
                    monodromy: MonodromyReport::new(&c.monodromy),
                    identity: c.identity,
                    section: c.section.as_ref().map(MatrixRepr::from_matrix),
                    section_degenerate: c.section_degenerate.clone(),
                    min_multiplier_distance: c.min_multiplier_distance,
                })
                .collect(),
            spectrum: report.spectrum.clone(),
            spectrum_labels: report.spectrum_labels.clone(),
            kernel_tests: report
                .kernel_tests
                .iter()
                .map(|k| KernelPairJson {
                    cycle_a: k.cycle_a.clone(),
                    cycle_b: k.cycle_b.clone(),
                    kernel_dimension: k.result.as_ref().map(|r| r.kernel.dimension),
                    kernel_basis: k
                        .result
                        .as_ref()
                        .map(|r| {
                            r.kernel
                                .basis
                                .iter()
                                .map(|v| MatrixRepr {
                                    rows: v.len(),
                                    cols: 1,
                                    data: v.iter().copied().collect(),
                                })
                                .collect()
                        })
                        .unwrap_or_default(),
                    contains_section: k.result.as_ref().map(|r| r.contains_section),
                    max_candidate_residual: k.result.as_ref().map(|r| r.max_candidate_residual),
                    skipped: k.skipped.clone(),
                })
                .collect(),
            compatibility: report.compatibility.clone(),
            section_checks: report.section_checks.clone(),
            notes: report.notes.clone(),
            config: report.config.clone(),
        }
    }

    pub fn to_json(&self) -> String
    where
        R: Serialize,
    {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

fn fmt_sci<R: Real>(v: R) -> String {
    format!("{:.6e}", v.as_f64())
}

fn fmt_complex<R: Real>(z: &Complex<R>) -> String {
    if Numeric::abs(z.im) <= R::of(1e-12) {
        format!("{:.6}", z.re.as_f64())
    } else if z.im > R::zero() {
        format!("{:.6}+{:.6}i", z.re.as_f64(), z.im.as_f64())
    } else {
        format!("{:.6}{:.6}i", z.re.as_f64(), z.im.as_f64())
    }
}

/// Fixed-layout text rendering of a monodromy result.
pub fn monodromy_text<R: Real>(m: &MonodromyResult<R>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "loop {}  (step {})\n",
        m.loop_label,
        fmt_sci(m.integrator_step)
    ));
    out.push_str("M =\n");
    for i in 0..m.m.nrows() {
        let row: Vec<String> = (0..m.m.ncols())
            .map(|j| format!("{:>16.9e}", m.m[(i, j)].as_f64()))
            .collect();
        out.push_str(&format!("  [{}]\n", row.join(" ")));
    }
    let mult: Vec<String> = m.multipliers.iter().map(fmt_complex).collect();
    out.push_str(&format!("multipliers:            {}\n", mult.join(", ")));
    let rmult: Vec<String> = m.restricted_multipliers.iter().map(fmt_complex).collect();
    out.push_str(&format!("restricted multipliers: {}\n", rmult.join(", ")));
    let rexp: Vec<String> = m.restricted_exponents.iter().map(fmt_complex).collect();
    out.push_str(&format!("restricted exponents:   {}\n", rexp.join(", ")));
    out
}

pub fn hypothesis_text<R: Real>(h: &HypothesisReport<R>) -> String {
    let mut out = String::new();
    let flag = |ok: bool| if ok { "ok" } else { "FAIL" };
    out.push_str(&format!(
        "transition round trips: {:<4} max {}  (tol 1e-9)\n",
        flag(h.transitions_ok),
        fmt_sci(h.transition_roundtrip_max)
    ));
    out.push_str(&format!(
        "zero-section invariance: {:<4} max {}  (tol 1e-9)\n",
        flag(h.invariance_ok),
        fmt_sci(h.invariance_max)
    ));
    out.push_str(&format!(
        "distribution rank:      {:<4} rank {} everywhere, smallest retained sv {}\n",
        flag(h.rank_ok),
        h.expected_rank,
        fmt_sci(h.min_retained_singular_value)
    ));
    out.push_str(&format!(
        "involutivity residual:  {:<4} max {}\n",
        flag(h.involutivity_ok),
        fmt_sci(h.involutivity_max)
    ));
    for f in &h.failures {
        out.push_str(&format!("  ! {f}\n"));
    }
    out
}

/// Fixed-layout text rendering of the persistence report: one row per
/// cycle, then the spectral, kernel, compatibility and section lines with
/// the tolerances each decision used.
pub fn persistence_text<R: Real>(report: &PersistenceReport<R>) -> String {
    let mut out = String::new();
    out.push_str(&format!("scenario: {}\n", report.scenario));
    let verdict = match report.verdict {
        Verdict::Persists => "persists",
        Verdict::FailsSpectrum => "fails_spectrum",
        Verdict::FailsCompatibility => "fails_compatibility",
        Verdict::Inconclusive => "inconclusive",
    };
    out.push_str(&format!("verdict:  {verdict}\n"));
    if report.corollary1_applied {
        out.push_str("route:    trivial fundamental group (no cycles to check)\n");
    }
    if let Some(h) = &report.hypothesis {
        out.push_str("hypotheses:\n");
        for line in hypothesis_text(h).lines() {
            out.push_str(&format!("  {line}\n"));
        }
    }
    if !report.per_cycle.is_empty() {
        out.push_str(&format!(
            "\n{:<10} {:<34} {:<16} {}\n",
            "cycle", "restricted multipliers", "dist-to-circle", "section y = B z"
        ));
        for c in &report.per_cycle {
            let mult: Vec<String> = c
                .monodromy
                .restricted_multipliers
                .iter()
                .map(fmt_complex)
                .collect();
            let section = if c.identity {
                "(identity monodromy)".to_string()
            } else if let Some(b) = &c.section {
                let entries: Vec<String> = b.iter().map(|v| format!("{:.6}", v.as_f64())).collect();
                format!("B = [{}]", entries.join(", "))
            } else {
                format!(
                    "degenerate: {}",
                    c.section_degenerate.as_deref().unwrap_or("?")
                )
            };
            out.push_str(&format!(
                "{:<10} {:<34} {:<16} {}\n",
                c.label,
                mult.join(", "),
                fmt_sci(c.min_multiplier_distance),
                section
            ));
        }
    }
    if let Some(sp) = &report.spectrum {
        let outcome = match sp.outcome {
            SpectrumOutcome::Pass => "pass",
            SpectrumOutcome::Fail => "fail",
            SpectrumOutcome::Inconclusive => "inconclusive",
        };
        let word: Vec<&str> = sp
            .witness_word
            .iter()
            .map(|i| {
                report
                    .spectrum_labels
                    .get(*i)
                    .map(String::as_str)
                    .unwrap_or("?")
            })
            .collect();
        out.push_str(&format!(
            "\nspectrum test: {outcome}{} | min distance {} at word [{}] | {} words | margin {}\n",
            if sp.exact { " (exact)" } else { "" },
            fmt_sci(sp.min_distance),
            word.join(" "),
            sp.words_checked,
            fmt_sci(report.config.unit_circle_margin),
        ));
        out.push_str(&format!("  note: {}\n", sp.note));
    }
    for k in &report.kernel_tests {
        match (&k.result, &k.skipped) {
            (Some(r), _) => out.push_str(&format!(
                "kernel test {} ~ {}: dim {} | section inside: {} | residual {}\n",
                k.cycle_a,
                k.cycle_b,
                r.kernel.dimension,
                if r.contains_section { "yes" } else { "NO" },
                fmt_sci(r.max_candidate_residual)
            )),
            (None, Some(why)) => out.push_str(&format!(
                "kernel test {} ~ {}: skipped ({why})\n",
                k.cycle_a, k.cycle_b
            )),
            _ => {}
        }
    }
    for o in &report.compatibility {
        let ok = o.discrepancy <= report.config.compatibility_tol;
        out.push_str(&format!(
            "compatibility {}({}) ~ {}({}): discrepancy {} {} tol {}\n",
            o.cycle_a,
            o.region_a,
            o.cycle_b,
            o.region_b,
            fmt_sci(o.discrepancy),
            if ok { "<=" } else { ">" },
            fmt_sci(report.config.compatibility_tol)
        ));
    }
    for s in &report.section_checks {
        out.push_str(&format!(
            "section fixed by {}: residual {} {} tol {} -> {}\n",
            s.loop_label,
            fmt_sci(s.max_residual),
            if s.passed { "<=" } else { ">" },
            fmt_sci(s.tolerance),
            if s.passed { "ok" } else { "FAIL" }
        ));
    }
    for n in &report.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}
