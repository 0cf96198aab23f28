//! Round-off bounds for iterated and direct evaluation and the resulting detector precision.
//!
//! All magnitudes are expressed for the canonical input range `|x| in [1, 2^W]`; the runtime
//! rescales by the power of two that maps the scanned data onto that range. Bounds are
//! accumulated with upward rounding so they stay conservative.

use serde::{Deserialize, Serialize};

use crate::coeffs::{CoeffRow, CoeffTable};
use crate::dd::ExtendedFloat;
use crate::error::{Error, Result};
use crate::float::{ceil_log2, exponent, pow2, ulp, FloatModel};
use crate::stencil::{ArrayRole, ExponentRange, StencilSpec};
use crate::synthesis::EssentialWidth;

/// Largest canonical exponent width that is profiled.
pub const EXP_MAX: u32 = 20;

/// Canonical width used for a scanned range: zero-width (all-zero) input counts as one
/// binade and widths beyond the profiled maximum are clamped.
pub fn canonical_width(range: Option<ExponentRange>) -> u32 {
    range.map(|r| r.width()).unwrap_or(0).clamp(1, EXP_MAX)
}

#[inline]
pub(crate) fn up_add(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s == 0.0 || crate::dd::two_sum(a, b).1 == 0.0 {
        s
    } else {
        s.next_up()
    }
}

#[inline]
pub(crate) fn up_mul(a: f64, b: f64) -> f64 {
    let (p, e) = crate::dd::two_prod(a, b);
    if e == 0.0 {
        p
    } else {
        p.next_up()
    }
}

/// Upper bound of `|c|` as a double.
#[inline]
pub(crate) fn abs_up(c: ExtendedFloat) -> f64 {
    let a = c.abs();
    let d = a.to_f64();
    if ExtendedFloat::from_f64(d) < a {
        d.next_up()
    } else {
        d
    }
}

/// Whether multiplying by `c` in double precision is exact: `c` is zero or a power of two
/// with no low-order part.
pub(crate) fn is_exact_scaling(c: ExtendedFloat) -> bool {
    c.lo == 0.0 && (c.hi == 0.0 || c.hi.abs() == pow2(exponent(c.hi).unwrap()))
}

/// Per-depth sums of the path coefficients for every `(target, source)` pair:
/// `sum |c|`, `sum max(c, 0)` and `sum max(-c, 0)`, each rounded up.
#[derive(Clone, Debug, Default)]
pub struct PathSums {
    pub arrays: usize,
    abs: Vec<Vec<f64>>,
    pos: Vec<Vec<f64>>,
    neg: Vec<Vec<f64>>,
}

impl PathSums {
    pub fn new(arrays: usize) -> Self {
        Self { arrays, ..Default::default() }
    }

    pub fn from_table(table: &CoeffTable) -> Self {
        let mut s = Self::new(table.arrays);
        for row in table.rows() {
            s.push_row(row);
        }
        s
    }

    /// Appends the sums of the next depth; rows must arrive in order `0, 1, 2, ...`.
    pub fn push_row(&mut self, row: &CoeffRow) {
        assert_eq!(row.k, self.abs.len(), "rows must be pushed in order");
        let n = self.arrays;
        let mut abs = vec![0.0; n * n];
        let mut pos = vec![0.0; n * n];
        let mut neg = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let Some(b) = row.block(u, v) else { continue };
                let (mut p, mut m) = (ExtendedFloat::ZERO, ExtendedFloat::ZERO);
                for &c in b {
                    if c.hi > 0.0 {
                        p += c;
                    } else if c.hi < 0.0 {
                        m += -c;
                    }
                }
                pos[u * n + v] = abs_up(p);
                neg[u * n + v] = abs_up(m);
                abs[u * n + v] = abs_up(p + m);
            }
        }
        self.abs.push(abs);
        self.pos.push(pos);
        self.neg.push(neg);
    }

    pub fn tmax(&self) -> usize {
        self.abs.len().saturating_sub(1)
    }

    pub fn abs(&self, k: usize, u: usize, v: usize) -> f64 {
        self.abs[k][u * self.arrays + v]
    }

    /// Upper bound on `|A_v|` after `k` steps from canonical data.
    pub fn magnitude(&self, k: usize, v: usize, w: u32) -> f64 {
        let mut s = 0.0;
        for m in 0..self.arrays {
            s = up_add(s, self.abs(k, v, m));
        }
        s * pow2(w as i32)
    }

    /// Interval enclosure `[lo, hi]` of the direct-evaluation sum for target `u` at depth `k`
    /// with all inputs in `[1, 2^W]`.
    pub fn direct_sum(&self, k: usize, u: usize, w: u32) -> (f64, f64) {
        let top = pow2(w as i32);
        let (mut p, mut m) = (0.0, 0.0);
        for v in 0..self.arrays {
            p = up_add(p, self.pos[k][u * self.arrays + v]);
            m = up_add(m, self.neg[k][u * self.arrays + v]);
        }
        let (p_lo, m_lo) = (lower_sum(&self.pos[k], u, self.arrays), lower_sum(&self.neg[k], u, self.arrays));
        (p_lo - m * top, p * top - m_lo)
    }

    /// `E_T`: exponent of the largest magnitude the detector sum can take, `None` when the
    /// row vanishes.
    pub fn top_exponent(&self, k: usize, u: usize, w: u32) -> Option<i32> {
        let (lo, hi) = self.direct_sum(k, u, w);
        let mag = lo.abs().max(hi.abs());
        if mag == 0.0 {
            None
        } else {
            exponent(mag.next_up())
        }
    }
}

/// A lower bound of the sum of nonnegative entries (the stored sums are upper bounds, so
/// shrink them by a relative margin that dominates their rounding).
fn lower_sum(v: &[f64], u: usize, n: usize) -> f64 {
    let s: f64 = v[u * n..(u + 1) * n].iter().sum();
    s * (1.0 - pow2(-48))
}

/// Sum of the magnitudes of every rounded intermediate in one update of array `v`, given
/// bounds on the magnitudes of the inputs.
fn op_magnitudes(spec: &StencilSpec, v: usize, mags: &[f64]) -> f64 {
    if spec.role(v) != ArrayRole::State {
        return 0.0;
    }
    let mut total = 0.0;
    let mut partial = 0.0;
    for (i, t) in spec.terms(v).iter().enumerate() {
        let p = up_mul(t.coeff.abs(), mags[t.from]);
        total = up_add(total, p);
        partial = up_add(partial, p);
        if i > 0 {
            total = up_add(total, partial);
        }
    }
    total
}

/// Absolute error bound `T_E` of `T` iterated steps for target `u` (canonical units).
///
/// Each rounding at step `t'` has magnitude at most `eps` times its intermediate bound and
/// reaches the target through the `(T - t')`-step path coefficients.
pub fn iterated_abs_bound(spec: &StencilSpec, sums: &PathSums, u: usize, t: usize, w: u32, model: &FloatModel) -> f64 {
    let eps = model.op_eps();
    let mut te = 0.0;
    for tp in 1..=t {
        let mags: Vec<f64> = (0..spec.arrays).map(|v| sums.magnitude(tp - 1, v, w)).collect();
        for v in 0..spec.arrays {
            let node = op_magnitudes(spec, v, &mags);
            if node == 0.0 {
                continue;
            }
            let k = sums.abs(t - tp, u, v);
            te = up_add(te, up_mul(up_mul(node, k), eps));
        }
    }
    te
}

/// Absolute error bound of the compensated direct evaluation over `ew` for target `u`
/// (canonical units), including the contribution of trimmed points.
pub fn direct_abs_bound(row: &CoeffRow, u: usize, w: u32, ew: &EssentialWidth, model: &FloatModel) -> f64 {
    let top = pow2(w as i32);
    let mut retained = ExtendedFloat::ZERO;
    let mut inexact = ExtendedFloat::ZERO;
    let mut excluded = ExtendedFloat::ZERO;
    let mut n = 0usize;
    for v in 0..row.arrays {
        for (o, c) in row.nonzero(u, v) {
            let a = c.abs();
            if ew.contains(&o) {
                retained += a;
                if !is_exact_scaling(c) {
                    inexact += a;
                }
                n += 1;
            } else {
                excluded += a;
            }
        }
    }
    let margin = abs_up(retained + excluded) * pow2(-96);
    let up = |x: ExtendedFloat| if x.is_zero() { 0.0 } else { up_add(abs_up(x), margin) };
    direct_abs_from_sums(up(retained), up(inexact), up(excluded), n, top, model)
}

pub(crate) fn direct_abs_from_sums(retained: f64, inexact: f64, excluded: f64, n: usize, top: f64, model: &FloatModel) -> f64 {
    let u = model.unit_roundoff();
    let s = retained * top;
    // Each inexact coefficient is rounded to double once and its product rounds once.
    let mut te = up_mul(up_mul(inexact, top), model.op_eps() + u + pow2(-100));
    if n >= 2 {
        // The computed sum may round up into the next binade of `s`.
        let kahan = up_add(2.0 * ulp(up_mul(s, 1.0 + pow2(-40))), up_mul(s, 4.0 * n as f64 * u * u));
        te = up_add(te, kahan);
    }
    up_add(te, up_mul(excluded, top))
}

/// `p - ceil(log2(max(rs, rd)))`, clamped to `[0, p]`; `p` when both bounds vanish.
pub fn detector_precision(rs: f64, rd: f64, model: &FloatModel) -> u32 {
    let p = model.precision as i32;
    let m = rs.max(rd);
    if m <= 0.0 {
        return p as u32;
    }
    if !m.is_finite() {
        return 0;
    }
    (p - ceil_log2(m)).clamp(0, p) as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    /// Iterated bound in ulps of the top binade of the detector sum.
    pub rs: f64,
    /// Direct bound in the same unit.
    pub rd: f64,
    /// Absolute bound on `|direct - iterated|` for canonical data.
    pub total_abs: f64,
    pub dp: u32,
    /// `E_T`, the exponent of the largest possible detector sum.
    pub e_top: i32,
}

/// Relative units: `R = T_E / (mu 2^{E_T})`.
fn relative(te: f64, e_top: i32, model: &FloatModel) -> f64 {
    let unit = model.ulp_one() * pow2(e_top);
    let r = te / unit;
    if r == 0.0 {
        0.0
    } else {
        r.next_up()
    }
}

/// Combines both bounds into a detector precision with `R_s + R_d <= 2^{p - dp}`, so that
/// a clean run never reaches the detection threshold `2^{E_T - dp + 1}`.
pub fn combine(te_s: f64, te_d: f64, e_top: i32, model: &FloatModel) -> ErrorEstimate {
    let rs = relative(te_s, e_top, model);
    let rd = relative(te_d, e_top, model);
    let mut dp = detector_precision(rs, rd, model);
    let p = model.precision as i32;
    while dp > 0 && up_add(rs, rd) > pow2(p - dp as i32) {
        dp -= 1;
    }
    ErrorEstimate { rs, rd, total_abs: up_add(te_s, te_d), dp, e_top }
}

fn check_range(t: usize, tmax: usize, w: u32) -> Result<()> {
    if t > tmax {
        return Err(Error::TstepOutOfRange { t, tmax });
    }
    if w > EXP_MAX {
        return Err(Error::ExponentRangeUnprofiled(w));
    }
    Ok(())
}

fn first_target(spec: &StencilSpec) -> Result<usize> {
    spec.detector_targets().first().copied().ok_or_else(|| Error::InvalidSpec("no array evolves under the stencil".into()))
}

/// `R_s` for the first detector target.
pub fn iterated_error_bound(spec: &StencilSpec, t: usize, exp: ExponentRange, table: &CoeffTable, model: &FloatModel) -> Result<f64> {
    let w = exp.width().max(1);
    check_range(t, table.tmax, w)?;
    let u = first_target(spec)?;
    let sums = PathSums::from_table(table);
    let e_top = sums.top_exponent(t, u, w).ok_or_else(|| Error::InfeasibleConfig("detector sum vanishes".into()))?;
    Ok(relative(iterated_abs_bound(spec, &sums, u, t, w, model), e_top, model))
}

/// `R_d` for the first detector target over the essential width `ew`.
pub fn direct_error_bound(
    spec: &StencilSpec,
    t: usize,
    exp: ExponentRange,
    table: &CoeffTable,
    ew: &EssentialWidth,
    model: &FloatModel,
) -> Result<f64> {
    let w = exp.width().max(1);
    check_range(t, table.tmax, w)?;
    let u = first_target(spec)?;
    let sums = PathSums::from_table(table);
    let e_top = sums.top_exponent(t, u, w).ok_or_else(|| Error::InfeasibleConfig("detector sum vanishes".into()))?;
    Ok(relative(direct_abs_bound(table.row(t)?, u, w, ew, model), e_top, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::unroll_coefficients;
    use crate::float::OpBound;
    use crate::stencil::{BoundaryCondition, PairTerms};

    fn heat1d() -> StencilSpec {
        StencilSpec {
            dims: 1,
            arrays: 1,
            lower: vec![0],
            upper: vec![255],
            pairs: vec![PairTerms { to: 0, from: 0, offsets: vec![vec![-1], vec![0], vec![1]], coeffs: vec![0.25, 0.5, 0.25] }],
            boundary: BoundaryCondition::constant(vec![0.0]),
        }
    }

    #[test]
    fn precision_arithmetic() {
        let m = FloatModel::binary64();
        assert_eq!(detector_precision(0.0, 0.0, &m), 53);
        assert_eq!(detector_precision(1.0, 0.5, &m), 53);
        assert_eq!(detector_precision(2.0, 0.0, &m), 52);
        assert_eq!(detector_precision(0.0, 256.0, &m), 45);
        assert_eq!(detector_precision(3.0, 0.0, &m), 51);
        assert_eq!(detector_precision(f64::INFINITY, 0.0, &m), 0);
        assert_eq!(detector_precision(2f64.powi(60), 0.0, &m), 0);
    }

    #[test]
    fn zero_steps_have_no_error() {
        let s = heat1d();
        let t = unroll_coefficients(&s, 4).unwrap();
        let r = ExponentRange { e_min: 0, e_max: 0 };
        assert_eq!(iterated_error_bound(&s, 0, r, &t, &FloatModel::binary64()).unwrap(), 0.0);
    }

    #[test]
    fn heat_64_steps_gives_45_bits() {
        let s = heat1d();
        let t = unroll_coefficients(&s, 64).unwrap();
        let m = FloatModel::binary64();
        let sums = PathSums::from_table(&t);
        // With inputs up to 2 the three products are bounded by 1, 0.5, 0.5 and the two
        // partial sums by 1.5, 2: each step contributes 5.5 mu, every path sum is 1.
        let te = iterated_abs_bound(&s, &sums, 0, 64, 1, &m);
        assert!(te >= 352.0 * m.ulp_one() && te < 352.001 * m.ulp_one(), "{}", te / m.ulp_one());
        let rs = iterated_error_bound(&s, 64, ExponentRange { e_min: 0, e_max: 0 }, &t, &m).unwrap();
        assert_eq!(detector_precision(rs, 0.0, &m), 45);
    }

    #[test]
    fn op_bound_knob_halves_the_bound() {
        let s = heat1d();
        let t = unroll_coefficients(&s, 16).unwrap();
        let sums = PathSums::from_table(&t);
        let m = FloatModel::binary64();
        let a = iterated_abs_bound(&s, &sums, 0, 16, 1, &m);
        let b = iterated_abs_bound(&s, &sums, 0, 16, 1, &m.with_op_bound(OpBound::UnitRoundoff));
        assert!((a / b - 2.0).abs() < 1e-9);
    }

    #[test]
    fn copy_has_no_direct_error() {
        let row = CoeffRow::identity(1, 1);
        let ew = EssentialWidth { left: vec![0], right: vec![0] };
        assert_eq!(direct_abs_bound(&row, 0, 1, &ew, &FloatModel::binary64()), 0.0);
    }

    #[test]
    fn direct_is_tighter_than_iterated_for_heat() {
        let s = heat1d();
        let t = unroll_coefficients(&s, 64).unwrap();
        let m = FloatModel::binary64();
        let r = ExponentRange { e_min: 0, e_max: 0 };
        let full = EssentialWidth { left: vec![64], right: vec![64] };
        let rs = iterated_error_bound(&s, 64, r, &t, &m).unwrap();
        let rd = direct_error_bound(&s, 64, r, &t, &full, &m).unwrap();
        assert!(rd < rs, "rd {rd} rs {rs}");
    }
}
