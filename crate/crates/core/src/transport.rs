//! Loop lifting through the connection and Floquet monodromy matrices.
//!
//! The nonlinear lift integrates the fiber equation along a loop; the
//! monodromy matrix integrates the transverse variational equation
//! `W' = L(u) W`, `W(0) = I`, with classical fixed-step RK4 applied segment
//! by segment (the connection may jump at chart junctions, so steps never
//! straddle one). Every loop is reparametrized to `[0, 1]`, which fixes the
//! Floquet period to 1 and makes multipliers and exponents comparable across
//! loops. A matrix exponential is never used; `L` need not be constant.

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

use crate::atlas::{Dimensions, Loop};
use crate::fields::{
    alpha_at, connection_at_frame, field_components, segment_frame, FieldError, FieldRef,
    LoopFrame,
};
use crate::num::{cln, cmod, Numeric, Real};
use crate::scenario::Scenario;

/// Tolerance for the structural block checks on a monodromy matrix.
pub const BLOCK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TransportError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
    #[error("integrator step must be positive")]
    BadStep,
    #[error("fiber point has dimension {got}, expected {expected}")]
    FiberDimension { expected: usize, got: usize },
    #[error("loop `{label}`: fiber trajectory reached |w| = {reached} > {bound} at u = {u} before the loop closed")]
    EscapedFiberBox {
        label: String,
        u: String,
        reached: String,
        bound: String,
    },
    #[error("eigenvalue iteration failed to converge")]
    Eigensolver,
    #[error("monodromy block structure violated: {0}")]
    BlockStructure(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Monodromy matrix of one loop with its block decomposition and spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct MonodromyResult<R: Real> {
    pub loop_label: String,
    pub dims: Dimensions,
    pub integrator_step: R,
    /// Full (s+q) x (s+q) matrix.
    pub m: DMatrix<R>,
    /// Restricted block (top-left s x s).
    pub m0: DMatrix<R>,
    /// Parameter coupling block (top-right s x q).
    pub m1: DMatrix<R>,
    /// I - M.
    pub r: DMatrix<R>,
    /// I - M0.
    pub r0: DMatrix<R>,
    /// Eigenvalues of M, by descending modulus then real then imaginary part.
    pub multipliers: Vec<Complex<R>>,
    /// Eigenvalues of M0, same order.
    pub restricted_multipliers: Vec<Complex<R>>,
    /// Principal logarithms of the restricted multipliers.
    pub restricted_exponents: Vec<Complex<R>>,
}

/// Dense nonsymmetric eigenvalues via the real Schur form (Francis QR),
/// sorted for deterministic reports.
pub fn complex_eigenvalues<R: Real>(m: &DMatrix<R>) -> Result<Vec<Complex<R>>, TransportError> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), R::default_epsilon(), 10_000)
        .ok_or(TransportError::Eigensolver)?;
    let mut eig: Vec<Complex<R>> = schur.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| {
        cmod(b)
            .partial_cmp(&cmod(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.re.partial_cmp(&a.re).unwrap_or(std::cmp::Ordering::Equal))
            .then(b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(eig)
}

impl<R: Real> MonodromyResult<R> {
    /// Wrap a computed matrix: verify the block structure of the transverse
    /// monodromy (zero bottom-left, identity bottom-right, q unit
    /// multipliers) and extract blocks and spectra.
    pub fn from_matrix(
        loop_label: impl Into<String>,
        dims: Dimensions,
        integrator_step: R,
        m: DMatrix<R>,
    ) -> Result<Self, TransportError> {
        let s = dims.fiber;
        let q = dims.params;
        let w = s + q;
        if m.nrows() != w || m.ncols() != w {
            return Err(TransportError::Dimension(format!(
                "monodromy matrix is {}x{}, expected {w}x{w}",
                m.nrows(),
                m.ncols()
            )));
        }
        let tol = R::of(BLOCK_TOL);
        let bottom_left = m.view((s, 0), (q, s));
        if q > 0 && bottom_left.amax() > tol {
            return Err(TransportError::BlockStructure(format!(
                "parameter-phase block reaches {:e}",
                bottom_left.amax()
            )));
        }
        let bottom_right = m.view((s, s), (q, q));
        let mut br_dev = R::zero();
        for i in 0..q {
            for j in 0..q {
                let expected = if i == j { R::one() } else { R::zero() };
                br_dev = br_dev.max(Numeric::abs(bottom_right[(i, j)] - expected));
            }
        }
        if br_dev > tol {
            return Err(TransportError::BlockStructure(format!(
                "parameter block deviates from the identity by {br_dev:e}"
            )));
        }
        let m0 = m.view((0, 0), (s, s)).into_owned();
        let m1 = m.view((0, s), (s, q)).into_owned();
        let r = DMatrix::identity(w, w) - &m;
        let r0 = DMatrix::identity(s, s) - &m0;
        let multipliers = complex_eigenvalues(&m)?;
        let unit = multipliers
            .iter()
            .filter(|z| cmod(&(**z - Complex::new(R::one(), R::zero()))) <= tol)
            .count();
        if unit < q {
            return Err(TransportError::BlockStructure(format!(
                "expected {q} unit multipliers, found {unit}"
            )));
        }
        let restricted_multipliers = complex_eigenvalues(&m0)?;
        let restricted_exponents = restricted_multipliers.iter().map(|z| cln(z)).collect();
        Ok(MonodromyResult {
            loop_label: loop_label.into(),
            dims,
            integrator_step,
            m,
            m0,
            m1,
            r,
            r0,
            multipliers,
            restricted_multipliers,
            restricted_exponents,
        })
    }

    /// Max-norm distance of M from the identity.
    pub fn deviation_from_identity(&self) -> R {
        let w = self.dims.transverse();
        let mut worst = R::zero();
        for i in 0..w {
            for j in 0..w {
                let expected = if i == j { R::one() } else { R::zero() };
                worst = worst.max(Numeric::abs(self.m[(i, j)] - expected));
            }
        }
        worst
    }

    pub fn is_identity(&self, tol: R) -> bool {
        self.deviation_from_identity() <= tol
    }
}

struct SegmentGrid<R> {
    segment: usize,
    steps: usize,
    /// Step in the segment's own parameter.
    h_t: R,
    /// Step in the global parameter.
    h_u: R,
    t0: R,
}

fn segment_grids<R: Real>(lp: &Loop<R>, step: R) -> Result<Vec<SegmentGrid<R>>, TransportError> {
    if step <= R::zero() {
        return Err(TransportError::BadStep);
    }
    let total = lp.total_span();
    let mut grids = Vec::with_capacity(lp.segments.len());
    for (i, seg) in lp.segments.iter().enumerate() {
        let span_u = seg.span() / total;
        let n = (span_u / step).ceil().as_f64() as usize;
        let n = n.max(1);
        grids.push(SegmentGrid {
            segment: i,
            steps: n,
            h_t: seg.span() / R::from_usize(n).unwrap(),
            h_u: span_u / R::from_usize(n).unwrap(),
            t0: seg.t0,
        });
    }
    Ok(grids)
}

fn check_domain<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    frame: &LoopFrame<R>,
) -> Result<(), TransportError> {
    let chart = scn.atlas.chart(&frame.chart).map_err(FieldError::Atlas)?;
    if !chart
        .contains(&frame.point)
        .map_err(|e| FieldError::Eval(e))?
    {
        return Err(TransportError::Atlas(
            crate::atlas::AtlasError::OutsideDomain {
                chart: frame.chart.clone(),
                point: format!("{:?}", frame.point),
                context: format!(" (loop `{}`)", lp.label),
            },
        ));
    }
    Ok(())
}

/// Integrate the matrix variational equation `W' = L(u) W` around the loop
/// and package the endpoint as a [`MonodromyResult`].
pub fn monodromy<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    step: R,
) -> Result<MonodromyResult<R>, TransportError> {
    lp.validate(&scn.atlas)?;
    let w = scn.dims.transverse();
    let mut wmat = DMatrix::<R>::identity(w, w);
    let half = R::of(0.5);
    let sixth = R::one() / R::of(6.0);
    let two = R::of(2.0);
    for grid in segment_grids(lp, step)? {
        let l_of = |t: R| -> Result<DMatrix<R>, TransportError> {
            let frame = segment_frame(scn, lp, grid.segment, t)?;
            Ok(connection_at_frame(scn, lp, &frame)?)
        };
        // L(t0) of one step equals L(t1) of the previous; reuse it
        let mut l_left = l_of(grid.t0)?;
        for j in 0..grid.steps {
            let t = grid.t0 + R::from_usize(j).unwrap() * grid.h_t;
            let frame = segment_frame(scn, lp, grid.segment, t)?;
            check_domain(scn, lp, &frame)?;
            let l_mid = l_of(t + grid.h_t * half)?;
            let l_right = l_of(t + grid.h_t)?;
            let h = grid.h_u;
            let k1 = &l_left * &wmat;
            let k2 = &l_mid * (&wmat + &k1 * (h * half));
            let k3 = &l_mid * (&wmat + &k2 * (h * half));
            let k4 = &l_right * (&wmat + &k3 * h);
            wmat += (k1 + k2 * two + k3 * two + k4) * (h * sixth);
            l_left = l_right;
        }
    }
    MonodromyResult::from_matrix(lp.label.clone(), scn.dims, step, wmat)
}

fn fiber_rhs<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    frame: &LoopFrame<R>,
    fiber: &[R],
) -> Result<Vec<R>, TransportError> {
    let alpha = alpha_at(scn, lp, frame, fiber)?;
    let d = scn.fields.generator_count();
    let w = scn.dims.transverse();
    let mut rate = vec![R::zero(); w];
    for i in 0..d {
        let comps = field_components::<R, R>(
            scn,
            &FieldRef::new(frame.chart.clone(), i),
            &frame.chart,
            &frame.point,
            fiber,
        )
        .map_err(TransportError::Field)?;
        for (slot, c) in rate.iter_mut().zip(&comps[scn.dims.base..]) {
            *slot += alpha.solution[i] * *c;
        }
    }
    Ok(rate)
}

fn integrate_fiber<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    w0: &[R],
    step: R,
) -> Result<Vec<R>, TransportError> {
    let width = scn.dims.transverse();
    if w0.len() != width {
        return Err(TransportError::FiberDimension {
            expected: width,
            got: w0.len(),
        });
    }
    let bound = scn.fiber_box;
    let check_box = |w: &[R], u: R| -> Result<(), TransportError> {
        let reached = w.iter().fold(R::zero(), |a, v| a.max(Numeric::abs(*v)));
        if reached > bound {
            return Err(TransportError::EscapedFiberBox {
                label: lp.label.clone(),
                u: format!("{u}"),
                reached: format!("{reached}"),
                bound: format!("{bound}"),
            });
        }
        Ok(())
    };
    let mut w = w0.to_vec();
    check_box(&w, R::zero())?;
    let half = R::of(0.5);
    let sixth = 1.0 / 6.0;
    for grid in segment_grids(lp, step)? {
        for j in 0..grid.steps {
            let t = grid.t0 + R::from_usize(j).unwrap() * grid.h_t;
            let f0 = segment_frame(scn, lp, grid.segment, t)?;
            check_domain(scn, lp, &f0)?;
            let fm = segment_frame(scn, lp, grid.segment, t + grid.h_t * half)?;
            let f1 = segment_frame(scn, lp, grid.segment, t + grid.h_t)?;
            let h = grid.h_u;
            let add = |w: &[R], k: &[R], c: R| -> Vec<R> {
                w.iter().zip(k).map(|(a, b)| *a + *b * c).collect()
            };
            let k1 = fiber_rhs(scn, lp, &f0, &w)?;
            let k2 = fiber_rhs(scn, lp, &fm, &add(&w, &k1, h * half))?;
            let k3 = fiber_rhs(scn, lp, &fm, &add(&w, &k2, h * half))?;
            let k4 = fiber_rhs(scn, lp, &f1, &add(&w, &k3, h))?;
            for i in 0..width {
                w[i] += h * R::of(sixth) * (k1[i] + R::of(2.0) * (k2[i] + k3[i]) + k4[i]);
            }
            check_box(&w, f1.u)?;
        }
    }
    Ok(w)
}

/// Transport a fiber point around a closed loop through the nonlinear
/// connection. Parameter components come back bit-identical: their rate is
/// identically zero.
pub fn lift_loop<R: Real>(
    scn: &Scenario<R>,
    lp: &Loop<R>,
    w0: &[R],
    step: R,
) -> Result<Vec<R>, TransportError> {
    lp.validate(&scn.atlas)?;
    integrate_fiber(scn, lp, w0, step)
}

/// Same transport along an open piecewise path (junctions are still checked,
/// closure is not). Diagnostic companion to [`lift_loop`].
pub fn lift_open_path<R: Real>(
    scn: &Scenario<R>,
    path: &Loop<R>,
    w0: &[R],
    step: R,
) -> Result<Vec<R>, TransportError> {
    // validate junction continuity only: reuse loop validation on a closed
    // dummy? simpler: check junctions pairwise here
    let tol = R::of(crate::atlas::GLUE_TOL);
    for i in 0..path.segments.len().saturating_sub(1) {
        let seg = &path.segments[i];
        let next = &path.segments[i + 1];
        let (end, _) = seg.at(seg.t1).map_err(FieldError::Eval)?;
        let (next_start, _) = next.at(next.t0).map_err(FieldError::Eval)?;
        let end_in_next = scn.atlas.transfer(&seg.chart, &next.chart, &end)?;
        let chart = scn.atlas.chart(&next.chart)?;
        if chart.periodic_distance(&end_in_next, &next_start) > tol {
            return Err(TransportError::Atlas(
                crate::atlas::AtlasError::JunctionMismatch {
                    label: path.label.clone(),
                    segment: i,
                    distance: format!(
                        "{}",
                        chart.periodic_distance(&end_in_next, &next_start)
                    ),
                },
            ));
        }
    }
    integrate_fiber(scn, path, w0, step)
}

/// Matrix product in loop-composition order: `a` is traversed after `b`,
/// so the result is `a.m * b.m` with the block structure re-verified.
pub fn compose_monodromy<R: Real>(
    a: &MonodromyResult<R>,
    b: &MonodromyResult<R>,
) -> Result<MonodromyResult<R>, TransportError> {
    if a.dims != b.dims {
        return Err(TransportError::Dimension(
            "monodromy results have different block dimensions".into(),
        ));
    }
    let m = &a.m * &b.m;
    MonodromyResult::from_matrix(
        format!("{}*{}", a.loop_label, b.loop_label),
        a.dims,
        a.integrator_step.max(b.integrator_step),
        m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dimensions {
        Dimensions {
            base: 2,
            fiber: 1,
            params: 1,
        }
    }

    #[test]
    fn block_extraction_and_spectra() {
        let kappa = (2.0 * std::f64::consts::PI).exp();
        let m = DMatrix::from_row_slice(2, 2, &[kappa, 1.0 - kappa, 0.0, 1.0]);
        let res = MonodromyResult::from_matrix("eta", dims(), 1e-3, m).unwrap();
        assert_eq!(res.m0[(0, 0)], kappa);
        assert_eq!(res.m1[(0, 0)], 1.0 - kappa);
        assert!((res.multipliers[0].re - kappa).abs() < 1e-9);
        assert!((res.multipliers[1].re - 1.0).abs() < 1e-9);
        assert!((res.restricted_exponents[0].re - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn block_structure_is_enforced() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.5, 1.0]);
        assert!(matches!(
            MonodromyResult::from_matrix("bad", dims(), 1e-3, m),
            Err(TransportError::BlockStructure(_))
        ));
    }

    #[test]
    fn composition_multiplies_blocks() {
        // (M_a M_b)^(0) = M_a^(0) M_b^(0) on compatible block matrices
        let a = MonodromyResult::from_matrix(
            "a",
            dims(),
            1e-3,
            DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 0.0, 1.0]),
        )
        .unwrap();
        let b = MonodromyResult::from_matrix(
            "b",
            dims(),
            1e-3,
            DMatrix::from_row_slice(2, 2, &[5.0, -1.0, 0.0, 1.0]),
        )
        .unwrap();
        let ab = compose_monodromy(&a, &b).unwrap();
        assert_eq!(ab.m0[(0, 0)], 10.0);
        assert_eq!(ab.m1[(0, 0)], 2.0 * -1.0 + 3.0);
        let ident = MonodromyResult::from_matrix(
            "i",
            dims(),
            1e-3,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let same = compose_monodromy(&a, &ident).unwrap();
        assert_eq!(same.m, a.m);
    }
}
