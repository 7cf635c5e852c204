//! Chart atlas for the candidate invariant manifold and closed loops on it.
//!
//! A chart is an axis-aligned coordinate box, optionally refined by a
//! predicate expression (positive inside) and with per-coordinate periods for
//! toroidal directions. Overlapping charts are glued by declared transition
//! maps; fiber coordinates are shared untransformed across charts, so only
//! base coordinates transform. Loops are user-declared piecewise expression
//! paths with explicit chart labels; chart crossings are never inferred.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Env, EvalError, Expression};
use crate::num::{Numeric, Real};

/// Junction, closure and round-trip checks use this tolerance.
pub const GLUE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AtlasError {
    #[error("unknown chart `{0}`")]
    UnknownChart(String),
    #[error("no transition declared for `{from}` -> `{to}`")]
    NoTransition { from: String, to: String },
    #[error("point {point} lies outside the declared overlap of `{from}` -> `{to}`")]
    OutsideOverlap {
        from: String,
        to: String,
        point: String,
    },
    #[error("point {point} escapes the domain of chart `{chart}`{context}")]
    OutsideDomain {
        chart: String,
        point: String,
        context: String,
    },
    #[error("loop `{label}`: segment {segment} does not meet the next segment (distance {distance})")]
    JunctionMismatch {
        label: String,
        segment: usize,
        distance: String,
    },
    #[error("loop `{label}` does not close up (distance {distance} from base point)")]
    NotClosed { label: String, distance: String },
    #[error("loop `{label}` has no segments")]
    EmptyLoop { label: String },
    #[error("loops `{a}` and `{b}` do not share a base point")]
    BasePointMismatch { a: String, b: String },
    #[error("could not draw a sample from `{0}` (predicate region too small?)")]
    SampleRejection(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn fmt_point<R: Real>(p: &[R]) -> String {
    let coords: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
    format!("({})", coords.join(", "))
}

/// Base, fiber-phase and parameter dimensions (k, s, q).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub base: usize,
    pub fiber: usize,
    pub params: usize,
}

impl Dimensions {
    /// Width of the transverse block: s + q.
    pub fn transverse(&self) -> usize {
        self.fiber + self.params
    }
}

/// A coordinate chart on the base manifold.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Chart<R: Real> {
    pub id: String,
    pub base_vars: Vec<String>,
    /// Interval per base variable, aligned with `base_vars`.
    pub intervals: Vec<(R, R)>,
    /// Optional period per base variable (toroidal directions fold modulo it).
    #[serde(default)]
    pub periods: Vec<Option<R>>,
    /// Optional refinement: the point is inside only where this is positive.
    #[serde(default)]
    pub predicate: Option<Expression<R>>,
    /// Declared sample points; validation asserts they lie in the domain.
    #[serde(default)]
    pub samples: Vec<Vec<R>>,
}

impl<R: Real> Chart<R> {
    pub fn dim(&self) -> usize {
        self.base_vars.len()
    }

    /// Fold periodic coordinates into their interval, in place.
    pub fn normalize(&self, point: &mut [R]) {
        for (i, v) in point.iter_mut().enumerate() {
            if let Some(Some(period)) = self.periods.get(i) {
                let lo = self.intervals[i].0;
                let turns = ((*v - lo) / *period).floor();
                *v -= turns * *period;
            }
        }
    }

    /// Same folding for derivative-carrying scalars; the shift is a constant
    /// chosen from the real part, so derivatives pass through untouched.
    pub fn normalize_numeric<S: Numeric<R>>(&self, point: &mut [S]) {
        for (i, v) in point.iter_mut().enumerate() {
            if let Some(Some(period)) = self.periods.get(i) {
                let lo = self.intervals[i].0;
                let turns = ((v.re() - lo) / *period).floor();
                *v = *v - S::from_real(turns * *period);
            }
        }
    }

    /// Membership test after period folding: box with a small tolerance on
    /// the faces, then the predicate (strictly positive).
    pub fn contains(&self, point: &[R]) -> Result<bool, EvalError> {
        let mut p = point.to_vec();
        self.normalize(&mut p);
        let tol = R::of(GLUE_TOL);
        for (i, v) in p.iter().enumerate() {
            let (lo, hi) = self.intervals[i];
            if *v < lo - tol || *v > hi + tol {
                return Ok(false);
            }
        }
        if let Some(pred) = &self.predicate {
            let pairs: Vec<(&str, R)> = self
                .base_vars
                .iter()
                .map(String::as_str)
                .zip(p.iter().copied())
                .collect();
            return Ok(pred.eval(&Env::new(&pairs))? > R::zero());
        }
        Ok(true)
    }

    /// Max-norm distance, folding periodic coordinates.
    pub fn periodic_distance(&self, a: &[R], b: &[R]) -> R {
        let mut worst = R::zero();
        for i in 0..self.dim() {
            let mut d = Numeric::abs(a[i] - b[i]);
            if let Some(Some(period)) = self.periods.get(i) {
                let folded = d - (d / *period).round() * *period;
                d = Numeric::abs(folded);
            }
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    /// Uniform sample from the box, rejected against the predicate.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<R>, AtlasError> {
        for _ in 0..10_000 {
            let p: Vec<R> = self
                .intervals
                .iter()
                .map(|(lo, hi)| {
                    let (lo, hi) = (lo.as_f64(), hi.as_f64());
                    if hi > lo {
                        R::of(rng.random_range(lo..hi))
                    } else {
                        R::of(lo)
                    }
                })
                .collect();
            if self.contains(&p)? {
                return Ok(p);
            }
        }
        Err(AtlasError::SampleRejection(self.id.clone()))
    }

    fn base_env<'a>(&'a self, point: &[R]) -> Vec<(&'a str, R)> {
        self.base_vars
            .iter()
            .map(String::as_str)
            .zip(point.iter().copied())
            .collect()
    }
}

/// Directed gluing map between two overlapping charts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct TransitionMap<R: Real> {
    pub from: String,
    pub to: String,
    /// New base coordinates as expressions in the source chart's variables.
    pub forward: Vec<Expression<R>>,
    /// Inverse map, in the target chart's variables.
    pub backward: Vec<Expression<R>>,
    /// Overlap predicate on the source chart (positive inside).
    pub overlap: Expression<R>,
}

/// The atlas: charts plus declared transitions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Atlas<R: Real> {
    pub charts: Vec<Chart<R>>,
    pub transitions: Vec<TransitionMap<R>>,
}

impl<R: Real> Atlas<R> {
    pub fn chart(&self, id: &str) -> Result<&Chart<R>, AtlasError> {
        self.charts
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| AtlasError::UnknownChart(id.to_string()))
    }

    pub fn transition_between(&self, from: &str, to: &str) -> Option<&TransitionMap<R>> {
        self.transitions
            .iter()
            .find(|t| t.from == from && t.to == to)
    }

    /// Whether the point (in `from` coordinates) satisfies the overlap
    /// predicate of the declared `from -> to` transition.
    pub fn in_overlap(&self, tm: &TransitionMap<R>, point: &[R]) -> Result<bool, AtlasError> {
        let chart = self.chart(&tm.from)?;
        let mut p = point.to_vec();
        chart.normalize(&mut p);
        let env = chart.base_env(&p);
        Ok(tm.overlap.eval(&Env::new(&env))? > R::zero())
    }

    /// Map a base point through the declared `from -> to` transition.
    pub fn transition(&self, from: &str, to: &str, point: &[R]) -> Result<Vec<R>, AtlasError> {
        let tm = self
            .transition_between(from, to)
            .ok_or_else(|| AtlasError::NoTransition {
                from: from.to_string(),
                to: to.to_string(),
            })?;
        if !self.in_overlap(tm, point)? {
            return Err(AtlasError::OutsideOverlap {
                from: from.to_string(),
                to: to.to_string(),
                point: fmt_point(point),
            });
        }
        let source = self.chart(from)?;
        let target = self.chart(to)?;
        let mut p = point.to_vec();
        source.normalize(&mut p);
        let env = source.base_env(&p);
        let mut image = Vec::with_capacity(tm.forward.len());
        for f in &tm.forward {
            image.push(f.eval(&Env::new(&env))?);
        }
        target.normalize(&mut image);
        Ok(image)
    }

    /// Identity within a chart, declared transition across charts.
    pub fn transfer(&self, from: &str, to: &str, point: &[R]) -> Result<Vec<R>, AtlasError> {
        if from == to {
            let mut p = point.to_vec();
            self.chart(from)?.normalize(&mut p);
            Ok(p)
        } else {
            self.transition(from, to, point)
        }
    }

    /// Draw a point of the overlap region of `tm`, in source coordinates.
    pub fn sample_overlap(
        &self,
        tm: &TransitionMap<R>,
        rng: &mut impl Rng,
    ) -> Result<Vec<R>, AtlasError> {
        let chart = self.chart(&tm.from)?;
        for _ in 0..100_000 {
            let p = chart.sample(rng)?;
            if self.in_overlap(tm, &p)? {
                return Ok(p);
            }
        }
        Err(AtlasError::SampleRejection(format!(
            "overlap {} -> {}",
            tm.from, tm.to
        )))
    }
}

/// One piece of a loop: a parametrized path inside a single chart.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct LoopSegment<R: Real> {
    pub chart: String,
    /// One expression per base coordinate, in the segment parameter `t`.
    pub path: Vec<Expression<R>>,
    pub t0: R,
    pub t1: R,
}

impl<R: Real> LoopSegment<R> {
    pub fn span(&self) -> R {
        self.t1 - self.t0
    }

    /// Point and d(point)/dt at local parameter `t`.
    pub fn at(&self, t: R) -> Result<(Vec<R>, Vec<R>), EvalError> {
        let mut point = Vec::with_capacity(self.path.len());
        let mut velocity = Vec::with_capacity(self.path.len());
        for p in &self.path {
            let (v, d) = p.eval_dual(&[("t", t)], &[("t", R::one())])?;
            point.push(v);
            velocity.push(d);
        }
        Ok((point, velocity))
    }
}

/// Closed path on the base manifold, as chart-labeled waypoint segments.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Loop<R: Real> {
    pub label: String,
    pub base_chart: String,
    pub base_point: Vec<R>,
    pub segments: Vec<LoopSegment<R>>,
}

/// One discretization sample along a loop, in the global parameter `u` that
/// reparametrizes the whole loop to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LoopSample<R> {
    pub segment: usize,
    pub chart: String,
    pub u: R,
    /// Parameter value inside the owning segment.
    pub t_local: R,
    pub point: Vec<R>,
    /// dφ/du, already rescaled to the global parameter.
    pub velocity: Vec<R>,
}

/// Position of a global parameter value inside the segment list.
#[derive(Clone, Copy, Debug)]
pub struct SegmentPos<R> {
    pub segment: usize,
    pub t_local: R,
    /// dt_local/du: converts segment-parameter velocities to global ones.
    pub scale: R,
}

impl<R: Real> Loop<R> {
    pub fn total_span(&self) -> R {
        self.segments
            .iter()
            .fold(R::zero(), |acc, s| acc + s.span())
    }

    /// Map global `u` in `[0,1]` to a segment and local parameter.
    pub fn locate(&self, u: R) -> Result<SegmentPos<R>, AtlasError> {
        if self.segments.is_empty() {
            return Err(AtlasError::EmptyLoop {
                label: self.label.clone(),
            });
        }
        let total = self.total_span();
        let target = u * total;
        let mut acc = R::zero();
        for (i, seg) in self.segments.iter().enumerate() {
            let next = acc + seg.span();
            let last = i + 1 == self.segments.len();
            if target <= next || last {
                let t_local = seg.t0 + (target - acc);
                let t_local = if t_local > seg.t1 { seg.t1 } else { t_local };
                return Ok(SegmentPos {
                    segment: i,
                    t_local,
                    scale: total,
                });
            }
            acc = next;
        }
        unreachable!("loop over non-empty segments always returns");
    }

    /// Check junction continuity between consecutive segments and closure
    /// back to the base point, applying declared transitions at chart
    /// junctions; everything within [`GLUE_TOL`].
    pub fn validate(&self, atlas: &Atlas<R>) -> Result<(), AtlasError> {
        if self.segments.is_empty() {
            return Err(AtlasError::EmptyLoop {
                label: self.label.clone(),
            });
        }
        let tol = R::of(GLUE_TOL);
        let first = &self.segments[0];
        let (start, _) = first.at(first.t0)?;
        let start_in_base = atlas.transfer(&first.chart, &self.base_chart, &start)?;
        let base_chart = atlas.chart(&self.base_chart)?;
        if base_chart.periodic_distance(&start_in_base, &self.base_point) > tol {
            return Err(AtlasError::NotClosed {
                label: self.label.clone(),
                distance: format!(
                    "{}",
                    base_chart.periodic_distance(&start_in_base, &self.base_point)
                ),
            });
        }
        for i in 0..self.segments.len() {
            let seg = &self.segments[i];
            let (end, _) = seg.at(seg.t1)?;
            if i + 1 < self.segments.len() {
                let next = &self.segments[i + 1];
                let (next_start, _) = next.at(next.t0)?;
                let end_in_next = atlas.transfer(&seg.chart, &next.chart, &end)?;
                let chart = atlas.chart(&next.chart)?;
                let d = chart.periodic_distance(&end_in_next, &next_start);
                if d > tol {
                    return Err(AtlasError::JunctionMismatch {
                        label: self.label.clone(),
                        segment: i,
                        distance: format!("{d}"),
                    });
                }
            } else {
                let end_in_base = atlas.transfer(&seg.chart, &self.base_chart, &end)?;
                let d = base_chart.periodic_distance(&end_in_base, &self.base_point);
                if d > tol {
                    return Err(AtlasError::NotClosed {
                        label: self.label.clone(),
                        distance: format!("{d}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Ordered samples covering every segment at roughly the requested step
    /// in the global parameter; left endpoints only, so a full loop at step
    /// `h` yields about `1/h` samples. Domain membership is asserted.
    pub fn discretize(&self, atlas: &Atlas<R>, step: R) -> Result<Vec<LoopSample<R>>, AtlasError> {
        if step <= R::zero() {
            return Err(AtlasError::Dimension("step must be positive".into()));
        }
        self.validate(atlas)?;
        let total = self.total_span();
        let mut out = Vec::new();
        let mut u_offset = R::zero();
        for (i, seg) in self.segments.iter().enumerate() {
            let span_u = seg.span() / total;
            let n = (span_u / step).ceil().as_f64() as usize;
            let n = n.max(1);
            let chart = atlas.chart(&seg.chart)?;
            for j in 0..n {
                let frac = R::from_usize(j).unwrap() / R::from_usize(n).unwrap();
                let t = seg.t0 + frac * seg.span();
                let (mut point, velocity) = seg.at(t)?;
                chart.normalize(&mut point);
                if !chart.contains(&point)? {
                    return Err(AtlasError::OutsideDomain {
                        chart: seg.chart.clone(),
                        point: fmt_point(&point),
                        context: format!(" (loop `{}`, segment {i})", self.label),
                    });
                }
                let velocity: Vec<R> = velocity.into_iter().map(|v| v * total).collect();
                out.push(LoopSample {
                    segment: i,
                    chart: seg.chart.clone(),
                    u: u_offset + frac * span_u,
                    t_local: t,
                    point,
                    velocity,
                });
            }
            u_offset += span_u;
        }
        Ok(out)
    }

    /// The same loop traversed backwards.
    pub fn reversed(&self) -> Loop<R> {
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|seg| {
                // t -> t0 + t1 - t flips the traversal without changing the range
                let flip = Expression::Bin(
                    crate::expr::BinOp::Sub,
                    Box::new(Expression::Lit(seg.t0 + seg.t1)),
                    Box::new(Expression::Var("t".into())),
                );
                LoopSegment {
                    chart: seg.chart.clone(),
                    path: seg.path.iter().map(|p| p.substitute("t", &flip)).collect(),
                    t0: seg.t0,
                    t1: seg.t1,
                }
            })
            .collect();
        Loop {
            label: format!("{}_reversed", self.label),
            base_chart: self.base_chart.clone(),
            base_point: self.base_point.clone(),
            segments,
        }
    }

    /// The loop traversed `k` times.
    pub fn repeated(&self, k: usize) -> Loop<R> {
        let mut segments = Vec::with_capacity(self.segments.len() * k);
        for _ in 0..k {
            segments.extend(self.segments.iter().cloned());
        }
        Loop {
            label: format!("{}^{k}", self.label),
            base_chart: self.base_chart.clone(),
            base_point: self.base_point.clone(),
            segments,
        }
    }

    /// Run `first`, then `second`; both must be based at the same point.
    pub fn concatenated(first: &Loop<R>, second: &Loop<R>) -> Result<Loop<R>, AtlasError> {
        if first.base_chart != second.base_chart {
            return Err(AtlasError::BasePointMismatch {
                a: first.label.clone(),
                b: second.label.clone(),
            });
        }
        let tol = R::of(GLUE_TOL);
        let close = first
            .base_point
            .iter()
            .zip(&second.base_point)
            .all(|(a, b)| Numeric::abs(*a - *b) <= tol);
        if !close {
            return Err(AtlasError::BasePointMismatch {
                a: first.label.clone(),
                b: second.label.clone(),
            });
        }
        let mut segments = first.segments.clone();
        segments.extend(second.segments.iter().cloned());
        Ok(Loop {
            label: format!("{}*{}", second.label, first.label),
            base_chart: first.base_chart.clone(),
            base_point: first.base_point.clone(),
            segments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn square_chart(id: &str) -> Chart<f64> {
        Chart {
            id: id.into(),
            base_vars: vec!["x".into(), "y".into()],
            intervals: vec![
                (-std::f64::consts::PI, std::f64::consts::PI),
                (-std::f64::consts::PI, std::f64::consts::PI),
            ],
            periods: vec![
                Some(2.0 * std::f64::consts::PI),
                Some(2.0 * std::f64::consts::PI),
            ],
            predicate: None,
            samples: vec![],
        }
    }

    #[test]
    fn normalize_folds_periodic_coordinates() {
        let chart = square_chart("c");
        let mut p = [4.0, -7.0];
        chart.normalize(&mut p);
        assert!((p[0] - (4.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((p[1] - (-7.0 + 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!(chart.contains(&p).unwrap());
    }

    #[test]
    fn periodic_distance_identifies_edges() {
        let chart = square_chart("c");
        let pi = std::f64::consts::PI;
        let d = chart.periodic_distance(&[1.0, -pi], &[1.0, pi]);
        assert!(d < 1e-12);
    }

    #[test]
    fn degenerate_loop_has_zero_tangents() {
        let atlas = Atlas {
            charts: vec![square_chart("c")],
            transitions: vec![],
        };
        let lp = Loop {
            label: "const".into(),
            base_chart: "c".into(),
            base_point: vec![0.5, 0.25],
            segments: vec![LoopSegment {
                chart: "c".into(),
                path: vec![parse("0.5").unwrap(), parse("0.25").unwrap()],
                t0: 0.0,
                t1: 1.0,
            }],
        };
        let samples = lp.discretize(&atlas, 0.25).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.velocity, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn open_path_is_rejected() {
        let atlas = Atlas {
            charts: vec![square_chart("c")],
            transitions: vec![],
        };
        let lp = Loop {
            label: "open".into(),
            base_chart: "c".into(),
            base_point: vec![0.0, 0.0],
            segments: vec![LoopSegment {
                chart: "c".into(),
                path: vec![parse("t").unwrap(), parse("0").unwrap()],
                t0: 0.0,
                t1: 1.0,
            }],
        };
        assert!(matches!(
            lp.validate(&atlas),
            Err(AtlasError::NotClosed { .. })
        ));
    }

    #[test]
    fn vertical_circle_closes_via_period() {
        let atlas = Atlas {
            charts: vec![square_chart("c")],
            transitions: vec![],
        };
        let lp = Loop {
            label: "circle".into(),
            base_chart: "c".into(),
            base_point: vec![1.0, -std::f64::consts::PI],
            segments: vec![LoopSegment {
                chart: "c".into(),
                path: vec![parse("1").unwrap(), parse("-pi + 2*pi*t").unwrap()],
                t0: 0.0,
                t1: 1.0,
            }],
        };
        lp.validate(&atlas).unwrap();
        let samples = lp.discretize(&atlas, 1e-3).unwrap();
        assert_eq!(samples.len(), 1000);
        for s in &samples {
            assert!((s.velocity[0]).abs() < 1e-12);
            assert!((s.velocity[1] - 2.0 * std::f64::consts::PI).abs() < 1e-9);
        }
    }

    #[test]
    fn reversal_flips_traversal() {
        let atlas = Atlas {
            charts: vec![square_chart("c")],
            transitions: vec![],
        };
        let lp = Loop {
            label: "circle".into(),
            base_chart: "c".into(),
            base_point: vec![1.0, -std::f64::consts::PI],
            segments: vec![LoopSegment {
                chart: "c".into(),
                path: vec![parse("1").unwrap(), parse("-pi + 2*pi*t").unwrap()],
                t0: 0.0,
                t1: 1.0,
            }],
        };
        let rev = lp.reversed();
        rev.validate(&atlas).unwrap();
        let s = rev.discretize(&atlas, 0.5).unwrap();
        assert!((s[0].velocity[1] + 2.0 * std::f64::consts::PI).abs() < 1e-9);
    }
}
