//! Parameter-dependent vector-field systems and their pointwise tests.
//!
//! Each chart carries the same number of generators, split into base,
//! fiber-phase and parameter components. Parameter components are required to
//! be the literal zero expression: the connection leaves every parameter
//! level set invariant. Commutators and linearizations are computed
//! numerically through dual numbers, never symbolically; fields from a
//! neighbouring chart are pushed into a common chart through the transition
//! Jacobian, which dual evaluation provides exactly (including the second
//! derivatives a commutator of pushed fields needs, via nested duals).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{Atlas, Chart, Dimensions, Loop, SegmentPos};
use crate::expr::{Env, EvalError, Expression};
use crate::num::{Dual, Numeric, Real};
use crate::persistence::AnalysisConfig;
use crate::scenario::{Scenario, ScenarioError};

/// Relative singular-value threshold shared by every rank decision.
pub const RANK_REL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FieldError {
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("chart `{chart}` has no generator with index {index}")]
    UnknownGenerator { chart: String, index: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("loop `{label}`: tangent at u = {u} is not in the span of the generators (residual {residual})")]
    UnliftableTangent {
        label: String,
        u: String,
        residual: String,
    },
    #[error("loop `{label}`: generators are rank-deficient at u = {u} and the lift is ambiguous (connection spread {spread})")]
    AmbiguousLift {
        label: String,
        u: String,
        spread: String,
    },
    #[error("least-squares solve failed: {0}")]
    Solve(String),
}

/// One generator vector field on one chart.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct Generator<R: Real> {
    pub name: String,
    /// k expressions in the chart's base and fiber variables.
    pub base: Vec<Expression<R>>,
    /// s expressions; must vanish on the zero section.
    pub fiber: Vec<Expression<R>>,
    /// q expressions, each required to be the literal `0`.
    pub param: Vec<Expression<R>>,
}

/// The generators of every chart, keyed by chart id.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: serde::de::DeserializeOwned"))]
pub struct FieldSystem<R: Real> {
    pub generators: BTreeMap<String, Vec<Generator<R>>>,
}

/// A generator named by its home chart and position there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldRef {
    pub chart: String,
    pub index: usize,
}

impl FieldRef {
    pub fn new(chart: impl Into<String>, index: usize) -> Self {
        FieldRef {
            chart: chart.into(),
            index,
        }
    }
}

impl<R: Real> FieldSystem<R> {
    /// Generator count per chart (identical across charts).
    pub fn generator_count(&self) -> usize {
        self.generators.values().next().map_or(0, Vec::len)
    }

    pub fn generator(&self, fref: &FieldRef) -> Result<&Generator<R>, FieldError> {
        self.generators
            .get(&fref.chart)
            .and_then(|gens| gens.get(fref.index))
            .ok_or_else(|| FieldError::UnknownGenerator {
                chart: fref.chart.clone(),
                index: fref.index,
            })
    }

    pub(crate) fn validate(
        &self,
        atlas: &Atlas<R>,
        dims: &Dimensions,
        fiber_vars: &[String],
    ) -> Result<(), ScenarioError> {
        let invalid = |path: String, detail: String| ScenarioError::Invalid { path, detail };
        let d = self.generator_count();
        if d == 0 {
            return Err(invalid(
                "fields".into(),
                "at least one generator per chart is required".into(),
            ));
        }
        for chart in &atlas.charts {
            let gens = self.generators.get(&chart.id).ok_or_else(|| {
                invalid(
                    format!("fields[{}]", chart.id),
                    "chart has no generators".into(),
                )
            })?;
            if gens.len() != d {
                return Err(invalid(
                    format!("fields[{}]", chart.id),
                    format!("expected {d} generators, got {}", gens.len()),
                ));
            }
            for (gi, gen) in gens.iter().enumerate() {
                let path = format!("fields[{}][{gi}] ({})", chart.id, gen.name);
                if gen.base.len() != dims.base
                    || gen.fiber.len() != dims.fiber
                    || gen.param.len() != dims.params
                {
                    return Err(invalid(path, "component count mismatch".into()));
                }
                for p in &gen.param {
                    if !p.is_zero_literal() {
                        return Err(invalid(
                            path.clone(),
                            "parameter components must be the literal `0`".into(),
                        ));
                    }
                }
                let allowed: Vec<&str> = chart
                    .base_vars
                    .iter()
                    .chain(fiber_vars.iter())
                    .map(String::as_str)
                    .collect();
                for comp in gen.base.iter().chain(&gen.fiber).chain(&gen.param) {
                    for v in comp.free_vars() {
                        if !allowed.contains(&v) {
                            return Err(invalid(
                                path.clone(),
                                format!("unknown variable `{v}` in a component"),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn chart_env<'a, R: Real, S: Numeric<R>>(
    chart: &'a Chart<R>,
    fiber_vars: &'a [String],
    base: &[S],
    fiber: &[S],
) -> Vec<(&'a str, S)> {
    chart
        .base_vars
        .iter()
        .map(String::as_str)
        .zip(base.iter().copied())
        .chain(
            fiber_vars
                .iter()
                .map(String::as_str)
                .zip(fiber.iter().copied()),
        )
        .collect()
}

fn eval_all<R: Real, S: Numeric<R>>(
    exprs: &[Expression<R>],
    env: &Env<S>,
) -> Result<Vec<S>, EvalError> {
    exprs.iter().map(|e| e.eval_with(env)).collect()
}

/// Expressions mapping `view`-chart base coordinates into `home`-chart ones,
/// taken from whichever direction the transition was declared in.
fn pullback_exprs<'a, R: Real>(
    atlas: &'a Atlas<R>,
    home: &str,
    view: &str,
) -> Option<&'a [Expression<R>]> {
    if let Some(tm) = atlas.transition_between(home, view) {
        Some(&tm.backward)
    } else {
        atlas
            .transition_between(view, home)
            .map(|tm| tm.forward.as_slice())
    }
}

/// Expressions mapping `home`-chart base coordinates into `view`-chart ones.
fn pushforward_exprs<'a, R: Real>(
    atlas: &'a Atlas<R>,
    home: &str,
    view: &str,
) -> Option<&'a [Expression<R>]> {
    if let Some(tm) = atlas.transition_between(home, view) {
        Some(&tm.forward)
    } else {
        atlas
            .transition_between(view, home)
            .map(|tm| tm.backward.as_slice())
    }
}

/// All components (base, fiber, parameter) of a generator at a point of
/// `view_chart`, pushing through the transition when the generator lives on a
/// different chart. Fiber coordinates are shared across charts, so only the
/// base block picks up the transition Jacobian.
pub fn field_components<R: Real, S: Numeric<R>>(
    scn: &Scenario<R>,
    fref: &FieldRef,
    view_chart: &str,
    base: &[S],
    fiber: &[S],
) -> Result<Vec<S>, FieldError> {
    let gen = scn.fields.generator(fref)?;
    if fref.chart == view_chart {
        let chart = scn.atlas.chart(view_chart)?;
        let mut pt = base.to_vec();
        chart.normalize_numeric(&mut pt);
        let pairs = chart_env(chart, &scn.fiber_vars, &pt, fiber);
        let env = Env::new(&pairs);
        let mut out = eval_all(&gen.base, &env)?;
        out.extend(eval_all(&gen.fiber, &env)?);
        out.extend(eval_all(&gen.param, &env)?);
        return Ok(out);
    }

    let home_chart = scn.atlas.chart(&fref.chart)?;
    let view = scn.atlas.chart(view_chart)?;
    let pull = pullback_exprs(&scn.atlas, &fref.chart, view_chart).ok_or_else(|| {
        FieldError::Atlas(crate::atlas::AtlasError::NoTransition {
            from: fref.chart.clone(),
            to: view_chart.to_string(),
        })
    })?;
    let push = pushforward_exprs(&scn.atlas, &fref.chart, view_chart)
        .expect("pullback exists, so its mirror does too");

    // pull the base point back to the generator's home chart
    let mut view_pt = base.to_vec();
    view.normalize_numeric(&mut view_pt);
    let view_pairs: Vec<(&str, S)> = view
        .base_vars
        .iter()
        .map(String::as_str)
        .zip(view_pt.iter().copied())
        .collect();
    let mut home_pt = eval_all(pull, &Env::new(&view_pairs))?;
    home_chart.normalize_numeric(&mut home_pt);

    // home components
    let home_pairs = chart_env(home_chart, &scn.fiber_vars, &home_pt, fiber);
    let env = Env::new(&home_pairs);
    let beta = eval_all(&gen.base, &env)?;
    let f = eval_all(&gen.fiber, &env)?;
    let h = eval_all(&gen.param, &env)?;

    // Jacobian of the home -> view map at the home point, one dual sweep per
    // home variable; entries stay S-valued so callers may differentiate again
    let k = home_chart.dim();
    let zero = S::from_real(R::zero());
    let mut pushed = vec![zero; k];
    for j in 0..k {
        let dual_pairs: Vec<(&str, Dual<S>)> = home_chart
            .base_vars
            .iter()
            .map(String::as_str)
            .enumerate()
            .map(|(idx, name)| {
                let dot = if idx == j { R::one() } else { R::zero() };
                (name, Dual::new(home_pt[idx], S::from_real(dot)))
            })
            .collect();
        let denv = Env::new(&dual_pairs);
        for (i, fx) in push.iter().enumerate() {
            let jac_ij = fx.eval_with(&denv)?.dot;
            pushed[i] = pushed[i] + jac_ij * beta[j];
        }
    }

    let mut out = pushed;
    out.extend(f);
    out.extend(h);
    Ok(out)
}

/// Lie bracket `[a, b]` at a point, by two directional-derivative sweeps:
/// the derivative of `b`'s components along `a` minus the reverse.
pub fn commutator_at<R: Real>(
    scn: &Scenario<R>,
    view_chart: &str,
    a: &FieldRef,
    b: &FieldRef,
    base: &[R],
    fiber: &[R],
) -> Result<Vec<R>, FieldError> {
    let va = field_components::<R, R>(scn, a, view_chart, base, fiber)?;
    let vb = field_components::<R, R>(scn, b, view_chart, base, fiber)?;
    let k = base.len();

    let seed = |direction: &[R]| -> (Vec<Dual<R>>, Vec<Dual<R>>) {
        let b_pt: Vec<Dual<R>> = base
            .iter()
            .enumerate()
            .map(|(i, v)| Dual::new(*v, direction[i]))
            .collect();
        let f_pt: Vec<Dual<R>> = fiber
            .iter()
            .enumerate()
            .map(|(i, v)| Dual::new(*v, direction[k + i]))
            .collect();
        (b_pt, f_pt)
    };

    let (b_pt, f_pt) = seed(&va);
    let db_along_a = field_components::<R, Dual<R>>(scn, b, view_chart, &b_pt, &f_pt)?;
    let (b_pt, f_pt) = seed(&vb);
    let da_along_b = field_components::<R, Dual<R>>(scn, a, view_chart, &b_pt, &f_pt)?;

    Ok(db_along_a
        .iter()
        .zip(&da_along_b)
        .map(|(x, y)| x.dot - y.dot)
        .collect())
}

/// Minimum-norm least squares with rank and right-null-space reporting.
/// Threshold is [`RANK_REL_EPS`] times the largest singular value.
pub fn least_squares<R: Real>(
    mat: &DMatrix<R>,
    rhs: &DVector<R>,
) -> Result<LsqSolve<R>, FieldError> {
    let (rows, cols) = mat.shape();
    // pad to at least square so the thin SVD carries the full right factor
    let work = if cols > rows {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.view_mut((0, 0), (rows, cols)).copy_from(mat);
        padded
    } else {
        mat.clone()
    };
    let rhs_work = if cols > rows {
        let mut padded = DVector::zeros(cols);
        padded.view_mut((0, 0), (rows, 1)).copy_from(rhs);
        padded
    } else {
        rhs.clone()
    };
    let svd = work.svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(R::zero(), |a, s| a.max(*s));
    let eps = R::of(RANK_REL_EPS) * sigma_max;
    let rank = svd.rank(eps);
    let solution = svd
        .solve(&rhs_work, eps)
        .map_err(|e| FieldError::Solve(e.to_string()))?;
    let v_t = svd.v_t.as_ref().expect("requested right factor");
    let mut nullspace = Vec::new();
    for i in rank..cols.min(v_t.nrows()) {
        nullspace.push(v_t.row(i).transpose().into_owned());
    }
    let residual = (mat * &solution - rhs).norm();
    Ok(LsqSolve {
        solution,
        residual,
        rank,
        nullspace,
    })
}

pub struct LsqSolve<R: Real> {
    pub solution: DVector<R>,
    pub residual: R,
    pub rank: usize,
    pub nullspace: Vec<DVector<R>>,
}

/// Rank of the distribution spanned by the chart's generators at a point,
/// from the singular values of the d x (k+s) component matrix.
pub fn distribution_rank<R: Real>(
    scn: &Scenario<R>,
    chart_id: &str,
    base: &[R],
    fiber: &[R],
) -> Result<(usize, R), FieldError> {
    let chart = scn.atlas.chart(chart_id)?;
    if !chart.contains(base).map_err(FieldError::Eval)? {
        return Err(FieldError::Atlas(crate::atlas::AtlasError::OutsideDomain {
            chart: chart_id.to_string(),
            point: format!("{base:?}"),
            context: String::new(),
        }));
    }
    let d = scn.fields.generator_count();
    let width = scn.dims.base + scn.dims.fiber;
    let mut rows = Vec::with_capacity(d);
    for i in 0..d {
        let comps = field_components::<R, R>(
            scn,
            &FieldRef::new(chart_id, i),
            chart_id,
            base,
            fiber,
        )?;
        rows.push(comps[..width].to_vec());
    }
    let mat = DMatrix::from_fn(d, width, |i, j| rows[i][j]);
    let svd = mat.svd(false, false);
    let sigma_max = svd.singular_values.iter().fold(R::zero(), |a, s| a.max(*s));
    let eps = R::of(RANK_REL_EPS) * sigma_max;
    let mut rank = 0;
    let mut smallest_retained = R::zero();
    for s in svd.singular_values.iter() {
        if *s > eps {
            rank += 1;
            smallest_retained = *s;
        }
    }
    Ok((rank, smallest_retained))
}

/// Euclidean norm of the cross product of the two generators' phase
/// components; only defined for two generators on a 3-dimensional phase
/// chart (base + fiber = 3).
pub fn cross_product_norm<R: Real>(
    scn: &Scenario<R>,
    chart_id: &str,
    base: &[R],
    fiber: &[R],
) -> Result<R, FieldError> {
    let d = scn.fields.generator_count();
    let width = scn.dims.base + scn.dims.fiber;
    if d != 2 || width != 3 {
        return Err(FieldError::Dimension(format!(
            "cross product needs exactly 2 generators on a 3-dimensional phase chart, got d = {d}, k+s = {width}"
        )));
    }
    let x = field_components::<R, R>(scn, &FieldRef::new(chart_id, 0), chart_id, base, fiber)?;
    let y = field_components::<R, R>(scn, &FieldRef::new(chart_id, 1), chart_id, base, fiber)?;
    let cross = [
        x[1] * y[2] - x[2] * y[1],
        x[2] * y[0] - x[0] * y[2],
        x[0] * y[1] - x[1] * y[0],
    ];
    Ok(Numeric::sqrt(
        cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2],
    ))
}

/// Result of expressing a commutator in a pointwise basis of fields.
#[derive(Clone, Debug)]
pub struct InvolutivityResult<R> {
    pub residual: R,
    /// Least-squares coefficients, one per basis field, minimum-norm when the
    /// basis is rank-deficient at the point.
    pub coefficients: Vec<R>,
    pub rank: usize,
    pub rank_deficient: bool,
    pub commutator: Vec<R>,
}

/// Expand `[a, b]` in the given basis fields at a point of `view_chart`.
/// Basis fields from other charts are pushed through the transitions.
pub fn involutivity_residual<R: Real>(
    scn: &Scenario<R>,
    view_chart: &str,
    pair: (&FieldRef, &FieldRef),
    basis: &[FieldRef],
    base: &[R],
    fiber: &[R],
) -> Result<InvolutivityResult<R>, FieldError> {
    let c = commutator_at(scn, view_chart, pair.0, pair.1, base, fiber)?;
    let n = c.len();
    let mut cols = Vec::with_capacity(basis.len());
    for fref in basis {
        cols.push(field_components::<R, R>(scn, fref, view_chart, base, fiber)?);
    }
    let mat = DMatrix::from_fn(n, basis.len(), |i, j| cols[j][i]);
    let rhs = DVector::from_vec(c.clone());
    let solve = least_squares(&mat, &rhs)?;
    Ok(InvolutivityResult {
        residual: solve.residual,
        coefficients: solve.solution.iter().copied().collect(),
        rank: solve.rank,
        rank_deficient: solve.rank < basis.len(),
        commutator: c,
    })
}

/// Loop point, tangent and owning chart at one global-parameter value.
#[derive(Clone, Debug)]
pub struct LoopFrame<R> {
    pub chart: String,
    pub point: Vec<R>,
    /// dφ/du in the global parameter.
    pub velocity: Vec<R>,
    pub u: R,
}

/// Frame at an explicit segment and local parameter value. This is the
/// primitive the integrators use: unlike [`frame_at`], the segment is never
/// re-derived from the global parameter, so junction values stay inside the
/// segment being integrated.
pub fn segment_frame<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    segment: usize,
    t_local: R,
) -> Result<LoopFrame<R>, FieldError> {
    let seg = lp
        .segments
        .get(segment)
        .ok_or_else(|| FieldError::Dimension(format!("segment {segment} out of range")))?;
    let chart = scn.atlas.chart(&seg.chart)?;
    let (mut point, velocity) = seg.at(t_local)?;
    chart.normalize(&mut point);
    let total = lp.total_span();
    let velocity = velocity.into_iter().map(|v| v * total).collect();
    let before: R = lp.segments[..segment]
        .iter()
        .fold(R::zero(), |acc, s| acc + s.span());
    let u = (before + (t_local - seg.t0)) / total;
    Ok(LoopFrame {
        chart: seg.chart.clone(),
        point,
        velocity,
        u,
    })
}

pub fn frame_at<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    u: R,
) -> Result<LoopFrame<R>, FieldError> {
    let SegmentPos {
        segment, t_local, ..
    } = lp.locate(u).map_err(FieldError::Atlas)?;
    segment_frame(scn, lp, segment, t_local)
}

/// Lifting coefficients: solve base_components * alpha = velocity at the
/// frame's point and fiber value. Reports the span residual and any null
/// directions of the base-component matrix.
pub fn alpha_at<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    frame: &LoopFrame<R>,
    fiber: &[R],
) -> Result<LsqSolve<R>, FieldError> {
    let d = scn.fields.generator_count();
    let k = scn.dims.base;
    let mut cols = Vec::with_capacity(d);
    for i in 0..d {
        let comps = field_components::<R, R>(
            scn,
            &FieldRef::new(frame.chart.clone(), i),
            &frame.chart,
            &frame.point,
            fiber,
        )?;
        cols.push(comps[..k].to_vec());
    }
    let mat = DMatrix::from_fn(k, d, |i, j| cols[j][i]);
    let rhs = DVector::from_vec(frame.velocity.clone());
    let solve = least_squares(&mat, &rhs)?;
    let speed = rhs.norm();
    if solve.residual > R::of(1e-8) * (R::one() + speed) {
        return Err(FieldError::UnliftableTangent {
            label: lp.label.clone(),
            u: format!("{}", frame.u),
            residual: format!("{}", solve.residual),
        });
    }
    Ok(solve)
}

/// Jacobians of one generator's fiber and parameter components with respect
/// to the fiber coordinates, at the zero section of the frame's point.
fn transverse_jacobian<R: Real>(
    scn: &Scenario<R>,
    fref: &FieldRef,
    chart: &str,
    base: &[R],
) -> Result<DMatrix<R>, FieldError> {
    let s = scn.dims.fiber;
    let q = scn.dims.params;
    let w = s + q;
    let zero_fiber = vec![R::zero(); w];
    let mut jac = DMatrix::zeros(w, w);
    for j in 0..w {
        let base_pt: Vec<Dual<R>> = base.iter().map(|v| Dual::new(*v, R::zero())).collect();
        let fiber_pt: Vec<Dual<R>> = zero_fiber
            .iter()
            .enumerate()
            .map(|(i, v)| Dual::new(*v, if i == j { R::one() } else { R::zero() }))
            .collect();
        let comps = field_components::<R, Dual<R>>(scn, fref, chart, &base_pt, &fiber_pt)?;
        for i in 0..w {
            jac[(i, j)] = comps[scn.dims.base + i].dot;
        }
    }
    Ok(jac)
}

/// The transverse connection matrix L = [[F, G], [H, K]] at a loop frame,
/// with the generator linearizations weighted by the lifting coefficients.
/// H and K rows vanish because parameter components are literally zero.
pub fn connection_at_frame<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    frame: &LoopFrame<R>,
) -> Result<DMatrix<R>, FieldError> {
    let u = frame.u;
    let w = scn.dims.transverse();
    let zero_fiber = vec![R::zero(); w];
    let alpha = alpha_at(scn, lp, frame, &zero_fiber)?;
    let d = scn.fields.generator_count();
    let mut jacs = Vec::with_capacity(d);
    for i in 0..d {
        jacs.push(transverse_jacobian(
            scn,
            &FieldRef::new(frame.chart.clone(), i),
            &frame.chart,
            &frame.point,
        )?);
    }
    // a null direction of the base components must not change the connection
    for null in &alpha.nullspace {
        let mut spread = DMatrix::zeros(w, w);
        for (i, jac) in jacs.iter().enumerate() {
            spread += jac * null[i];
        }
        let worst = spread.amax();
        if worst > R::of(1e-9) {
            return Err(FieldError::AmbiguousLift {
                label: lp.label.clone(),
                u: format!("{u}"),
                spread: format!("{worst}"),
            });
        }
    }
    let mut l = DMatrix::zeros(w, w);
    for (i, jac) in jacs.iter().enumerate() {
        l += jac * alpha.solution[i];
    }
    Ok(l)
}

/// Connection matrix at a global parameter value.
pub fn connection_matrix_at<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    u: R,
) -> Result<DMatrix<R>, FieldError> {
    let frame = frame_at(scn, lp, u)?;
    connection_at_frame(scn, lp, &frame)
}

/// The connection matrices sampled along a loop.
#[derive(Clone, Debug)]
pub struct ConnectionSample<R: Real> {
    pub u: R,
    pub segment: usize,
    pub t_local: R,
    pub chart: String,
    pub point: Vec<R>,
    pub alpha: Vec<R>,
    pub f: DMatrix<R>,
    pub g: DMatrix<R>,
    pub h: DMatrix<R>,
    pub k: DMatrix<R>,
}

#[derive(Clone, Debug)]
pub struct LinearizedConnection<R: Real> {
    pub loop_label: String,
    pub samples: Vec<ConnectionSample<R>>,
}

/// Materialize F, G (and the vanishing H, K) on the discretization grid.
pub fn linearize<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    step: R,
) -> Result<LinearizedConnection<R>, FieldError> {
    let grid = lp.discretize(&scn.atlas, step)?;
    let s = scn.dims.fiber;
    let q = scn.dims.params;
    let w = s + q;
    let mut samples = Vec::with_capacity(grid.len());
    for g in grid {
        let frame = LoopFrame {
            chart: g.chart.clone(),
            point: g.point.clone(),
            velocity: g.velocity.clone(),
            u: g.u,
        };
        let zero_fiber = vec![R::zero(); w];
        let alpha = alpha_at(scn, lp, &frame, &zero_fiber)?;
        let l = connection_at_frame(scn, lp, &frame)?;
        let f = l.view((0, 0), (s, s)).into_owned();
        let gm = l.view((0, s), (s, q)).into_owned();
        let h = l.view((s, 0), (q, s)).into_owned();
        let k = l.view((s, s), (q, q)).into_owned();
        if h.amax() > R::of(1e-9) || k.amax() > R::of(1e-9) {
            return Err(FieldError::Dimension(
                "parameter rows of the linearized connection must vanish".into(),
            ));
        }
        samples.push(ConnectionSample {
            u: g.u,
            segment: g.segment,
            t_local: g.t_local,
            chart: g.chart,
            point: g.point,
            alpha: alpha.solution.iter().copied().collect(),
            f,
            g: gm,
            h,
            k,
        });
    }
    Ok(LinearizedConnection {
        loop_label: lp.label.clone(),
        samples,
    })
}

/// Summary of the standing-hypothesis checks for one scenario.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport<R> {
    pub samples_per_check: usize,
    pub seed: u64,
    pub transition_roundtrip_max: R,
    pub transitions_ok: bool,
    pub invariance_max: R,
    pub invariance_ok: bool,
    pub expected_rank: usize,
    pub rank_ok: bool,
    pub min_retained_singular_value: R,
    pub involutivity_max: R,
    pub involutivity_ok: bool,
    pub failures: Vec<String>,
}

impl<R: Real> HypothesisReport<R> {
    pub fn all_ok(&self) -> bool {
        self.transitions_ok && self.invariance_ok && self.rank_ok && self.involutivity_ok
    }
}

/// Run the sampled hypothesis suite: transition round trips, vanishing of
/// the fiber components on the zero section, constant distribution rank on
/// the base manifold, and involutivity residuals on charts and overlaps.
pub fn hypothesis_suite<R: Real>(
    scn: &Scenario<R>,
    cfg: &AnalysisConfig<R>,
) -> Result<HypothesisReport<R>, FieldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples;
    let glue_tol = R::of(crate::atlas::GLUE_TOL);
    let mut failures = Vec::new();

    // transition round trips
    let mut roundtrip_max = R::zero();
    for tm in &scn.atlas.transitions {
        let source = scn.atlas.chart(&tm.from)?;
        for _ in 0..n {
            let p = scn.atlas.sample_overlap(tm, &mut rng)?;
            let image = scn.atlas.transition(&tm.from, &tm.to, &p)?;
            let back = match scn.atlas.transition(&tm.to, &tm.from, &image) {
                Ok(b) => b,
                Err(crate::atlas::AtlasError::NoTransition { .. }) => {
                    // reverse not declared: evaluate this map's own backward
                    let target = scn.atlas.chart(&tm.to)?;
                    let pairs: Vec<(&str, R)> = target
                        .base_vars
                        .iter()
                        .map(String::as_str)
                        .zip(image.iter().copied())
                        .collect();
                    let mut back = Vec::with_capacity(tm.backward.len());
                    for b in &tm.backward {
                        back.push(b.eval(&Env::new(&pairs)).map_err(FieldError::Eval)?);
                    }
                    let mut back = back;
                    source.normalize(&mut back);
                    back
                }
                Err(e) => return Err(FieldError::Atlas(e)),
            };
            let d = source.periodic_distance(&p, &back);
            roundtrip_max = roundtrip_max.max(d);
        }
    }
    let transitions_ok = roundtrip_max <= glue_tol;
    if !transitions_ok {
        failures.push(format!(
            "transition round trip reached {roundtrip_max:e} (tolerance {glue_tol:e})"
        ));
    }

    // fiber components vanish on the zero section
    let w = scn.dims.transverse();
    let zero_fiber = vec![R::zero(); w];
    let mut invariance_max = R::zero();
    let d = scn.fields.generator_count();
    for chart in &scn.atlas.charts {
        for _ in 0..n {
            let p = chart.sample(&mut rng)?;
            for gi in 0..d {
                let comps = field_components::<R, R>(
                    scn,
                    &FieldRef::new(chart.id.clone(), gi),
                    &chart.id,
                    &p,
                    &zero_fiber,
                )?;
                for c in &comps[scn.dims.base..] {
                    invariance_max = invariance_max.max(Numeric::abs(*c));
                }
            }
        }
    }
    let invariance_ok = invariance_max <= glue_tol;
    if !invariance_ok {
        failures.push(format!(
            "fiber components reach {invariance_max:e} on the zero section (tolerance {glue_tol:e})"
        ));
    }

    // distribution rank on the base manifold
    let expected_rank = scn.dims.base.min(d);
    let mut rank_ok = true;
    let mut min_retained = R::zero();
    let mut first = true;
    for chart in &scn.atlas.charts {
        for _ in 0..n {
            let p = chart.sample(&mut rng)?;
            let (rank, retained) = distribution_rank(scn, &chart.id, &p, &zero_fiber)?;
            if rank != expected_rank {
                rank_ok = false;
                failures.push(format!(
                    "rank {rank} != {expected_rank} at {p:?} on `{}`",
                    chart.id
                ));
            }
            if first || retained < min_retained {
                min_retained = retained;
                first = false;
            }
        }
    }

    // involutivity: same-chart pairs everywhere, all pushed pairs on overlaps
    let fiber_scale = cfg.fiber_sample_radius;
    let mut involutivity_max = R::zero();
    let fiber_sample = |rng: &mut ChaCha8Rng| -> Vec<R> {
        (0..w)
            .map(|_| R::of(rng.random_range(-1.0..1.0)) * fiber_scale)
            .collect()
    };
    let check = |scn: &Scenario<R>,
                     view: &str,
                     pairs: &[(FieldRef, FieldRef)],
                     basis: &[FieldRef],
                     base: &[R],
                     fiber: &[R],
                     involutivity_max: &mut R,
                     failures: &mut Vec<String>|
     -> Result<(), FieldError> {
        for (a, b) in pairs {
            let res = involutivity_residual(scn, view, (a, b), basis, base, fiber)?;
            let comm_norm = Numeric::sqrt(
                res.commutator
                    .iter()
                    .fold(R::zero(), |acc, c| acc + *c * *c),
            );
            let tol = cfg.involutivity_tol * (R::one() + comm_norm);
            if res.residual > tol {
                failures.push(format!(
                    "involutivity residual {:e} (tolerance {tol:e}) for [{}, {}] on `{view}` at {base:?}",
                    res.residual, a.chart, b.chart
                ));
            }
            *involutivity_max = involutivity_max.max(res.residual);
        }
        Ok(())
    };

    for chart in &scn.atlas.charts {
        let refs: Vec<FieldRef> = (0..d).map(|i| FieldRef::new(chart.id.clone(), i)).collect();
        let mut pairs = Vec::new();
        for i in 0..d {
            for j in (i + 1)..d {
                pairs.push((refs[i].clone(), refs[j].clone()));
            }
        }
        for _ in 0..n {
            let p = chart.sample(&mut rng)?;
            let fib = fiber_sample(&mut rng);
            check(
                scn,
                &chart.id,
                &pairs,
                &refs,
                &p,
                &fib,
                &mut involutivity_max,
                &mut failures,
            )?;
        }
    }
    for tm in &scn.atlas.transitions {
        // view in the target chart; the source chart's fields get pushed
        let mut refs: Vec<FieldRef> = (0..d).map(|i| FieldRef::new(tm.to.clone(), i)).collect();
        refs.extend((0..d).map(|i| FieldRef::new(tm.from.clone(), i)));
        let mut pairs = Vec::new();
        for i in 0..refs.len() {
            for j in (i + 1)..refs.len() {
                pairs.push((refs[i].clone(), refs[j].clone()));
            }
        }
        for _ in 0..n {
            let p = scn.atlas.sample_overlap(tm, &mut rng)?;
            let image = scn.atlas.transition(&tm.from, &tm.to, &p)?;
            let fib = fiber_sample(&mut rng);
            check(
                scn,
                &tm.to,
                &pairs,
                &refs,
                &image,
                &fib,
                &mut involutivity_max,
                &mut failures,
            )?;
        }
    }
    let involutivity_ok = !failures.iter().any(|f| f.starts_with("involutivity"));

    Ok(HypothesisReport {
        samples_per_check: n,
        seed: cfg.seed,
        transition_roundtrip_max: roundtrip_max,
        transitions_ok,
        invariance_max,
        invariance_ok,
        expected_rank,
        rank_ok,
        min_retained_singular_value: min_retained,
        involutivity_max,
        involutivity_ok,
        failures,
    })
}

/// Check `linearize` against central finite differences of the nonlinear
/// connection components at the sampled points; returns the worst absolute
/// deviation. Test support, but useful as a diagnostic too.
pub fn linearization_fd_gap<R: Real>(
    scn: &Scenario<R>,
    lc: &LinearizedConnection<R>,
    lp: &Loop<R>,
) -> Result<R, FieldError> {
    let s = scn.dims.fiber;
    let q = scn.dims.params;
    let w = s + q;
    let h = R::of(1e-6);
    let mut worst = R::zero();
    for sample in &lc.samples {
        let frame = segment_frame(scn, lp, sample.segment, sample.t_local)?;
        for j in 0..w {
            let mut plus = vec![R::zero(); w];
            plus[j] = h;
            let mut minus = vec![R::zero(); w];
            minus[j] = -h;
            let a_plus = alpha_at(scn, lp, &frame, &plus)?;
            let a_minus = alpha_at(scn, lp, &frame, &minus)?;
            let rate = |fiber: &[R], alpha: &LsqSolve<R>| -> Result<Vec<R>, FieldError> {
                let d = scn.fields.generator_count();
                let mut out = vec![R::zero(); w];
                for i in 0..d {
                    let comps = field_components::<R, R>(
                        scn,
                        &FieldRef::new(frame.chart.clone(), i),
                        &frame.chart,
                        &frame.point,
                        fiber,
                    )?;
                    for (slot, c) in out.iter_mut().zip(&comps[scn.dims.base..]) {
                        *slot += alpha.solution[i] * *c;
                    }
                }
                Ok(out)
            };
            let f_plus = rate(&plus, &a_plus)?;
            let f_minus = rate(&minus, &a_minus)?;
            for i in 0..w {
                let fd = (f_plus[i] - f_minus[i]) / (h + h);
                let analytic = if j < s {
                    if i < s {
                        sample.f[(i, j)]
                    } else {
                        sample.h[(i - s, j)]
                    }
                } else if i < s {
                    sample.g[(i, j - s)]
                } else {
                    sample.k[(i - s, j - s)]
                };
                worst = worst.max(Numeric::abs(fd - analytic));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{Atlas, Chart};
    use crate::expr::parse;

    /// One flat chart, fields X = dx, Y = dy + x z dz (k=2, s=1, q=0).
    fn toy_scenario() -> Scenario<f64> {
        let chart = Chart {
            id: "c".into(),
            base_vars: vec!["x".into(), "y".into()],
            intervals: vec![(-4.0, 4.0), (-4.0, 4.0)],
            periods: vec![],
            predicate: None,
            samples: vec![],
        };
        let gens = vec![
            Generator {
                name: "X".into(),
                base: vec![parse("1").unwrap(), parse("0").unwrap()],
                fiber: vec![parse("0").unwrap()],
                param: vec![],
            },
            Generator {
                name: "Y".into(),
                base: vec![parse("0").unwrap(), parse("1").unwrap()],
                fiber: vec![parse("x * z").unwrap()],
                param: vec![],
            },
        ];
        let mut generators = BTreeMap::new();
        generators.insert("c".to_string(), gens);
        Scenario {
            name: "toy".into(),
            dims: Dimensions {
                base: 2,
                fiber: 1,
                params: 0,
            },
            fiber_vars: vec!["z".into()],
            fiber_box: 4.0,
            atlas: Atlas {
                charts: vec![chart],
                transitions: vec![],
            },
            fields: FieldSystem { generators },
            loops: vec![],
            homology_generators: vec![],
            cycle_regions: BTreeMap::new(),
            intersecting_pairs: vec![],
            trivial_pi1: false,
        }
    }

    #[test]
    fn commutator_of_shear_fields() {
        // [d/dx, d/dy + xz d/dz] = z d/dz
        let scn = toy_scenario();
        let a = FieldRef::new("c", 0);
        let b = FieldRef::new("c", 1);
        let c = commutator_at(&scn, "c", &a, &b, &[1.0, 0.0], &[1.0]).unwrap();
        assert!((c[0] - 0.0).abs() < 1e-12);
        assert!((c[1] - 0.0).abs() < 1e-12);
        assert!((c[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shear_commutator_not_in_span() {
        // oracle: minimize |(0,0,1) - aX - bY| over (a, b) with X = (1,0,0),
        // Y = (0,1,1): normal equations give a = 0, b = 1/2, residual sqrt(1/2)
        let scn = toy_scenario();
        let a = FieldRef::new("c", 0);
        let b = FieldRef::new("c", 1);
        let res = involutivity_residual(
            &scn,
            "c",
            (&a, &b),
            &[a.clone(), b.clone()],
            &[1.0, 0.0],
            &[1.0],
        )
        .unwrap();
        assert!((res.residual - (0.5f64).sqrt()).abs() < 1e-10);
        assert!(!res.rank_deficient);
        assert!((res.coefficients[0] - 0.0).abs() < 1e-10);
        assert!((res.coefficients[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn duplicated_generator_drops_rank() {
        let mut scn = toy_scenario();
        let gens = scn.fields.generators.get_mut("c").unwrap();
        gens[1] = gens[0].clone();
        let (rank, _) = distribution_rank(&scn, "c", &[0.3, 0.4], &[0.0]).unwrap();
        assert_eq!(rank, 1);
    }

    #[test]
    fn rank_of_independent_fields() {
        let scn = toy_scenario();
        let (rank, retained) = distribution_rank(&scn, "c", &[1.0, 0.0], &[0.5]).unwrap();
        assert_eq!(rank, 2);
        assert!(retained > 0.9);
    }

    #[test]
    fn cross_product_matches_determinant_expansion() {
        let scn = toy_scenario();
        let base = [0.7, -0.3];
        let fiber = [0.9];
        let x =
            field_components::<f64, f64>(&scn, &FieldRef::new("c", 0), "c", &base, &fiber)
                .unwrap();
        let y =
            field_components::<f64, f64>(&scn, &FieldRef::new("c", 1), "c", &base, &fiber)
                .unwrap();
        // brute-force 3x3 determinant expansion per component
        let det2 = |a: f64, b: f64, c: f64, d: f64| a * d - b * c;
        let expected = (det2(x[1], x[2], y[1], y[2]).powi(2)
            + det2(x[2], x[0], y[2], y[0]).powi(2)
            + det2(x[0], x[1], y[0], y[1]).powi(2))
        .sqrt();
        let got = cross_product_norm(&scn, "c", &base, &fiber).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_second_field_gives_zero_cross_product() {
        let mut scn = toy_scenario();
        let gens = scn.fields.generators.get_mut("c").unwrap();
        gens[1] = Generator {
            name: "Y".into(),
            base: vec![parse("0").unwrap(), parse("0").unwrap()],
            fiber: vec![parse("0").unwrap()],
            param: vec![],
        };
        let got = cross_product_norm(&scn, "c", &[0.1, 0.2], &[0.0]).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn cross_product_dimension_guard() {
        let mut scn = toy_scenario();
        scn.dims.fiber = 2;
        assert!(matches!(
            cross_product_norm(&scn, "c", &[0.0, 0.0], &[0.0, 0.0]),
            Err(FieldError::Dimension(_))
        ));
    }

    #[test]
    fn zero_fiber_fields_linearize_to_zero() {
        let mut scn = toy_scenario();
        for gen in scn.fields.generators.get_mut("c").unwrap() {
            gen.fiber = vec![parse("0").unwrap()];
        }
        scn.loops = vec![crate::atlas::Loop {
            label: "circle".into(),
            base_chart: "c".into(),
            base_point: vec![1.0, 0.0],
            segments: vec![crate::atlas::LoopSegment {
                chart: "c".into(),
                path: vec![
                    parse("cos(2*pi*t)").unwrap(),
                    parse("sin(2*pi*t)").unwrap(),
                ],
                t0: 0.0,
                t1: 1.0,
            }],
        }];
        let lc = linearize(&scn, &scn.loops[0], 0.05).unwrap();
        for s in &lc.samples {
            assert_eq!(s.f.amax(), 0.0);
        }
    }
}
