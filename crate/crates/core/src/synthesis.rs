//! Detector synthesis: essential width, protected width, coverage, cost and the offline
//! configuration lookup table.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoeffRow, CoeffTable, RowStream, TableWriter};
use crate::dd::ExtendedFloat;
use crate::error::{Error, Result};
use crate::error_model::{
    abs_up, combine, detector_precision, direct_abs_from_sums, is_exact_scaling, iterated_abs_bound, up_add, PathSums, EXP_MAX,
};
use crate::float::{exp_gap, exponent, pow2, FloatModel};
use crate::interval::{self, Interval};
use crate::stencil::StencilSpec;

/// Retained region `[-left, right]` per dimension around the detector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EssentialWidth {
    pub left: Vec<i32>,
    pub right: Vec<i32>,
}

impl EssentialWidth {
    pub fn full(radius: &[i32]) -> Self {
        Self { left: radius.to_vec(), right: radius.to_vec() }
    }

    pub fn contains(&self, o: &[i32]) -> bool {
        o.iter().zip(&self.left).zip(&self.right).all(|((&x, &l), &r)| x >= -l && x <= r)
    }

    /// `E_wl + E_wr + 1` per dimension.
    pub fn widths(&self) -> Vec<i32> {
        self.left.iter().zip(&self.right).map(|(l, r)| l + r + 1).collect()
    }

    pub fn volume(&self) -> u64 {
        self.widths().iter().map(|&w| w as u64).product()
    }

    /// Component-wise union.
    pub fn union(&self, o: &Self) -> Self {
        Self {
            left: self.left.iter().zip(&o.left).map(|(a, b)| *a.max(b)).collect(),
            right: self.right.iter().zip(&o.right).map(|(a, b)| *a.max(b)).collect(),
        }
    }
}

/// Products of each support point's coefficient with the canonical input interval.
#[derive(Clone, Debug)]
pub struct WeightedSupport {
    pub offsets: Vec<Vec<i32>>,
    pub coeffs: Vec<ExtendedFloat>,
    pub points: Vec<Interval>,
    pub total: Interval,
    /// Interval of `S_{Y \ i}` for every point.
    pub partial: Vec<Interval>,
}

/// Support of target `u` at the row's depth, every source array included, against inputs in
/// `[1, 2^W]`.
pub fn build_support(row: &CoeffRow, u: usize, w: u32) -> WeightedSupport {
    let canonical = Interval::new(1.0, pow2(w as i32));
    let mut offsets = Vec::new();
    let mut coeffs = Vec::new();
    for v in 0..row.arrays {
        for (o, c) in row.nonzero(u, v) {
            offsets.push(o);
            coeffs.push(c);
        }
    }
    let points: Vec<Interval> = coeffs.iter().map(|c| scale_extended(canonical, *c)).collect();
    support_from_points(offsets, coeffs, points)
}

fn support_from_points(offsets: Vec<Vec<i32>>, coeffs: Vec<ExtendedFloat>, points: Vec<Interval>) -> WeightedSupport {
    let n = points.len();
    let mut prefix = vec![Interval::ZERO; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + points[i];
    }
    let mut suffix = vec![Interval::ZERO; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + points[i];
    }
    let partial: Vec<Interval> = (0..n).map(|i| prefix[i] + suffix[i + 1]).collect();
    let total = points.iter().zip(&partial).fold(interval::sum(&points), |t, (&p, &q)| t.meet(p + q));
    WeightedSupport { offsets, coeffs, total, points, partial }
}

/// `c * I` for an extended coefficient, rounded outward.
fn scale_extended(i: Interval, c: ExtendedFloat) -> Interval {
    let hi = i.scale(c.hi);
    if c.lo == 0.0 {
        return hi;
    }
    let lo = i.scale(c.lo);
    let s = hi + lo;
    Interval::new(s.lo.next_down(), s.hi.next_up())
}

/// `p - d_min(y_i)` with `d_min = max(0, exp(mig S_{Y\i}) - exp(mag y_i))`.
pub fn max_contrib(s: &WeightedSupport, i: usize, p: u32) -> i64 {
    p as i64 - exp_gap(s.partial[i].exp_lower(), s.points[i].exp_upper())
}

/// `dp - d_max(y_i)` with `d_max = max(0, exp(mag S_{Y\i}) - exp(mig y_i))`.
pub fn min_contrib(s: &WeightedSupport, i: usize, dp: u32) -> i64 {
    dp as i64 - exp_gap(s.partial[i].exp_upper(), s.points[i].exp_lower())
}

/// Summed-area tables over a row's offset box, combining every source array, that answer
/// sums over Cartesian sub-boxes.
pub struct BoxSums {
    radius: Vec<i32>,
    dims_p: Vec<usize>,
    abs: Vec<ExtendedFloat>,
    pos: Vec<ExtendedFloat>,
    neg: Vec<ExtendedFloat>,
    inexact: Vec<ExtendedFloat>,
    nnz: Vec<i64>,
    margin: f64,
}

impl BoxSums {
    pub fn new(row: &CoeffRow, u: usize) -> Self {
        let radius = row.radius.clone();
        let dims_p: Vec<usize> = radius.iter().map(|&r| 2 * r as usize + 2).collect();
        let len: usize = dims_p.iter().product();
        let mut s = Self {
            radius,
            dims_p,
            abs: vec![ExtendedFloat::ZERO; len],
            pos: vec![ExtendedFloat::ZERO; len],
            neg: vec![ExtendedFloat::ZERO; len],
            inexact: vec![ExtendedFloat::ZERO; len],
            nnz: vec![0; len],
            margin: 0.0,
        };
        let mut total = ExtendedFloat::ZERO;
        for v in 0..row.arrays {
            let Some(b) = row.block(u, v) else { continue };
            for (i, &c) in b.iter().enumerate() {
                if c.is_zero() {
                    continue;
                }
                let o = row.offset_of(i);
                let idx = s.padded(&o.iter().map(|&x| x + 1).collect::<Vec<_>>());
                let a = c.abs();
                s.abs[idx] += a;
                if c.hi > 0.0 {
                    s.pos[idx] += c;
                } else {
                    s.neg[idx] += a;
                }
                if !is_exact_scaling(c) {
                    s.inexact[idx] += a;
                }
                s.nnz[idx] += 1;
                total += a;
            }
        }
        s.margin = abs_up(total) * pow2(-96);
        let strides = s.strides();
        for (j, &st) in strides.iter().enumerate() {
            for idx in 0..len {
                if (idx / st) % s.dims_p[j] == 0 {
                    continue;
                }
                let prev = idx - st;
                s.abs[idx] = s.abs[idx] + s.abs[prev];
                s.pos[idx] = s.pos[idx] + s.pos[prev];
                s.neg[idx] = s.neg[idx] + s.neg[prev];
                s.inexact[idx] = s.inexact[idx] + s.inexact[prev];
                s.nnz[idx] += s.nnz[prev];
            }
        }
        s
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.dims_p.len();
        let mut st = vec![1usize; d];
        for j in (0..d.saturating_sub(1)).rev() {
            st[j] = st[j + 1] * self.dims_p[j + 1];
        }
        st
    }

    /// Index of a padded coordinate where `o + radius` shifts offsets to start at 0.
    fn padded(&self, o1: &[i32]) -> usize {
        let mut idx = 0usize;
        for (j, &x) in o1.iter().enumerate() {
            idx = idx * self.dims_p[j] + (x + self.radius[j]) as usize;
        }
        idx
    }

    fn query<T: Copy>(&self, data: &[T], lo: &[i32], hi: &[i32], zero: T, add: impl Fn(T, T) -> T, neg: impl Fn(T) -> T) -> T {
        let d = lo.len();
        if lo.iter().zip(hi).any(|(a, b)| a > b) {
            return zero;
        }
        let mut acc = zero;
        let mut corner = vec![0i32; d];
        for mask in 0..(1u32 << d) {
            let mut odd = false;
            for j in 0..d {
                if mask & (1 << j) != 0 {
                    corner[j] = lo[j];
                    odd = !odd;
                } else {
                    corner[j] = hi[j] + 1;
                }
            }
            let v = data[self.padded(&corner)];
            acc = add(acc, if odd { neg(v) } else { v });
        }
        acc
    }

    fn ext(&self, data: &[ExtendedFloat], lo: &[i32], hi: &[i32]) -> ExtendedFloat {
        self.query(data, lo, hi, ExtendedFloat::ZERO, |a, b| a + b, |a| -a)
    }

    fn upper(&self, data: &[ExtendedFloat], lo: &[i32], hi: &[i32]) -> f64 {
        let v = self.ext(data, lo, hi);
        if v.is_zero() {
            return 0.0;
        }
        up_add(abs_up(v), self.margin)
    }

    fn lower(&self, data: &[ExtendedFloat], lo: &[i32], hi: &[i32]) -> f64 {
        let v = self.ext(data, lo, hi).to_f64();
        (v - self.margin).next_down().max(0.0)
    }

    pub fn abs_upper(&self, lo: &[i32], hi: &[i32]) -> f64 {
        self.upper(&self.abs, lo, hi)
    }

    pub fn inexact_upper(&self, lo: &[i32], hi: &[i32]) -> f64 {
        self.upper(&self.inexact, lo, hi)
    }

    pub fn nonzero_count(&self, lo: &[i32], hi: &[i32]) -> usize {
        self.query(&self.nnz, lo, hi, 0i64, |a, b| a + b, |a| -a).max(0) as usize
    }

    /// Smallest magnitude of the signed sum over a box with inputs in `[1, 2^W]`.
    pub fn mig(&self, lo: &[i32], hi: &[i32], w: u32) -> f64 {
        let top = pow2(w as i32);
        let p_lo = self.lower(&self.pos, lo, hi);
        let p_hi = self.upper(&self.pos, lo, hi);
        let n_lo = self.lower(&self.neg, lo, hi);
        let n_hi = self.upper(&self.neg, lo, hi);
        let s_lo = p_lo - n_hi * top;
        let s_hi = p_hi * top - n_lo;
        if s_lo > 0.0 {
            s_lo.next_down().max(0.0)
        } else if s_hi < 0.0 {
            (-s_hi).next_down().max(0.0)
        } else {
            0.0
        }
    }
}

/// Result of trimming: the retained region and an upper bound on `sum |c|` of what was cut.
#[derive(Clone, Debug)]
pub struct Trim {
    pub ew: EssentialWidth,
    pub excluded_abs: f64,
}

/// Greedily removes the cheapest outer slab (one side of one dimension) while the whole
/// excluded set stays `dp` binades below the retained sum. The center is never removed.
pub fn trim_support(b: &BoxSums, w: u32, dp: u32) -> Trim {
    let top = pow2(w as i32);
    let d = b.radius.len();
    let mut lo: Vec<i32> = b.radius.iter().map(|r| -r).collect();
    let mut hi: Vec<i32> = b.radius.clone();
    let mut excluded = 0.0;
    loop {
        let mut best: Option<(f64, usize, bool)> = None;
        for j in 0..d {
            for right in [false, true] {
                let edge = if right { hi[j] } else { lo[j] };
                if (right && edge <= 0) || (!right && edge >= 0) {
                    continue;
                }
                let (mut slo, mut shi) = (lo.clone(), hi.clone());
                slo[j] = edge;
                shi[j] = edge;
                let slab = b.abs_upper(&slo, &shi);
                let new_excl = up_add(excluded, slab);
                let (mut rlo, mut rhi) = (lo.clone(), hi.clone());
                if right {
                    rhi[j] -= 1;
                } else {
                    rlo[j] += 1;
                }
                let gap = exp_gap(exponent(b.mig(&rlo, &rhi, w)), exponent(new_excl * top));
                if gap >= dp as i64 && best.is_none_or(|(s, _, _)| slab < s) {
                    best = Some((slab, j, right));
                }
            }
        }
        let Some((slab, j, right)) = best else { break };
        excluded = up_add(excluded, slab);
        if right {
            hi[j] -= 1;
        } else {
            lo[j] += 1;
        }
    }
    Trim { ew: EssentialWidth { left: lo.iter().map(|x| -x).collect(), right: hi }, excluded_abs: excluded }
}

/// Essential width of a support for detector precision `dp`.
pub fn essential_width(row: &CoeffRow, u: usize, w: u32, dp: u32) -> EssentialWidth {
    trim_support(&BoxSums::new(row, u), w, dp).ew
}

/// Absolute direct-evaluation bound for a trimmed support, from box sums.
pub fn direct_abs_for_trim(b: &BoxSums, trim: &Trim, w: u32, model: &FloatModel) -> f64 {
    let lo: Vec<i32> = trim.ew.left.iter().map(|x| -x).collect();
    let hi = &trim.ew.right;
    direct_abs_from_sums(b.abs_upper(&lo, hi), b.inexact_upper(&lo, hi), trim.excluded_abs, b.nonzero_count(&lo, hi), pow2(w as i32), model)
}

/// Smallest binary exponent of `|c|` over the corruptible arrays at one offset; `None` if any
/// of them has a zero coefficient there.
fn level_at(row: &CoeffRow, u: usize, sources: &[usize], o: &[i32]) -> Option<i32> {
    let pos = row.position(o)?;
    let mut lvl = i32::MAX;
    for &v in sources {
        let c = row.block(u, v)?[pos];
        lvl = lvl.min(exponent(c.hi)?);
    }
    Some(lvl)
}

/// Offsets `[1 - ceil(pw/2), floor(pw/2)]` of a protected box of width `pw`.
pub fn pw_bounds(pw: i32) -> (i32, i32) {
    (1 - (pw + 1) / 2, pw / 2)
}

/// Largest isotropic box around the detector whose every point keeps a coefficient of at
/// least `2^{E_T - dp + udp}` from every corruptible array, for all look-backs `s < rho`.
/// A flip at significance `udp - 1` of such a point then moves the detector value by at
/// least the threshold `2^{E_T - dp + 1}`.
#[allow(clippy::too_many_arguments)]
pub fn protected_width(
    spec: &StencilSpec,
    table: &CoeffTable,
    u: usize,
    t: usize,
    rho: usize,
    dp: u32,
    udp: u32,
    e_top: i32,
) -> Result<Vec<i32>> {
    if udp == 0 || udp > dp {
        return Err(Error::EmptyProtectedRegion);
    }
    if rho == 0 || rho > t {
        return Err(Error::InfeasibleConfig(format!("rho {rho} outside 1..={t}")));
    }
    let level = e_top - dp as i32 + udp as i32;
    let sources = spec.state_arrays();
    let rows: Vec<&CoeffRow> = (0..rho).map(|s| table.row(t - s)).collect::<Result<_>>()?;
    let d = spec.dims;
    let ok = |o: &[i32]| rows.iter().all(|r| level_at(r, u, &sources, o).is_some_and(|l| l >= level));
    let mut best = 0;
    let max_pw = 2 * table.width.iter().max().copied().unwrap_or(0) * t as i32 + 1;
    for pw in 1..=max_pw {
        let (lo, hi) = pw_bounds(pw);
        let mut all = true;
        let mut o = vec![lo; d];
        'outer: loop {
            if !ok(&o) {
                all = false;
                break;
            }
            for j in (0..d).rev() {
                if o[j] < hi {
                    o[j] += 1;
                    continue 'outer;
                }
                o[j] = lo;
            }
            break;
        }
        if !all {
            break;
        }
        best = pw;
    }
    if best == 0 {
        return Err(Error::EmptyProtectedRegion);
    }
    Ok(vec![best; d])
}

/// `prod (N_i - 2 w_i T) / N_i`, clamped at zero.
pub fn interior_fraction(n: &[usize], w: &[i32], t: usize) -> f64 {
    n.iter().zip(w).map(|(&ni, &wi)| ((ni as f64 - 2.0 * wi as f64 * t as f64) / ni as f64).max(0.0)).product()
}

/// Interior fraction times the fraction of protected points inside the detector boxes.
pub fn coverage_fraction(in_box: f64, n: &[usize], w: &[i32], t: usize) -> f64 {
    interior_fraction(n, w, t) * in_box
}

/// `(1 / rho) prod (ew_i / pw_i)`.
pub fn config_cost(ew: &EssentialWidth, pw: &[i32], rho: usize) -> f64 {
    ew.widths().iter().zip(pw).map(|(&e, &p)| e as f64 / p as f64).product::<f64>() / rho as f64
}

/// Internal coverage target `cov / interior`, or `UnsupportedCoverage` when it exceeds 1.
pub fn adjust_coverage(cov: f64, interior: f64) -> Result<f64> {
    if cov <= 0.0 {
        return Ok(0.0);
    }
    let c = cov / interior;
    if c.is_finite() && c <= 1.0 {
        Ok(c)
    } else {
        Err(Error::UnsupportedCoverage)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub rho: usize,
    pub dp: u32,
    pub pw: Vec<i32>,
    pub ewl: Vec<i32>,
    pub ewr: Vec<i32>,
    pub cost: f64,
    pub coverage: f64,
    /// Arrays carrying detectors and the exponent `E_T` of each one's detector sum.
    pub targets: Vec<usize>,
    pub e_top: Vec<i32>,
}

impl DetectorConfig {
    pub fn ew(&self) -> EssentialWidth {
        EssentialWidth { left: self.ewl.clone(), right: self.ewr.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LutCell {
    Config(DetectorConfig),
    Infeasible(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LutMeta {
    pub spec_hash: String,
    pub extent: Vec<usize>,
    pub tmax: usize,
    pub exp_set: Vec<u32>,
    pub udp_set: Vec<u32>,
    pub cov_set: Vec<u32>,
    pub model: FloatModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigLUT {
    pub meta: LutMeta,
    pub entries: BTreeMap<String, LutCell>,
}

pub fn lut_key(w: u32, udp: u32, cov: u32) -> String {
    format!("e{w}:u{udp}:c{cov}")
}

impl ConfigLUT {
    pub fn cell(&self, w: u32, udp: u32, cov: u32) -> Option<&DetectorConfig> {
        match self.entries.get(&lut_key(w, udp, cov)) {
            Some(LutCell::Config(c)) => Some(c),
            _ => None,
        }
    }

    /// Looks up a goal: the width rounds up to the nearest profiled width (a configuration
    /// valid for wider data is valid for narrower) and the coverage rounds up to the grid.
    pub fn lookup(&self, w: u32, udp: u32, cov: f64) -> Result<&DetectorConfig> {
        let pw = self.meta.exp_set.iter().copied().filter(|&e| e >= w).min().ok_or(Error::ExponentRangeUnprofiled(w))?;
        let pct = cov * 100.0;
        let c = self.meta.cov_set.iter().copied().filter(|&c| c as f64 >= pct - 1e-9).min().ok_or(Error::UnsupportedCoverage)?;
        if !self.meta.udp_set.contains(&udp) {
            return Err(Error::InfeasibleConfig(format!("udp {udp} was not profiled")));
        }
        self.cell(pw, udp, c).ok_or_else(|| Error::InfeasibleConfig(format!("no configuration for width {pw}, udp {udp}, coverage {c}%")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Lowest and highest coefficient exponent levels tracked by the profiler.
const L_MIN: i32 = -64;
const L_MAX: i32 = 16;
const NL: usize = (L_MAX - L_MIN + 1) as usize;

/// Per-width analysis of one depth.
#[derive(Clone, Debug)]
struct DepthInfo {
    e_top: Option<i32>,
    dp: u32,
    ew: EssentialWidth,
}

/// Cumulative counts `P[k][pw][L]` over rows `0..=k` of the per-depth counts.
struct LevelCounts {
    pw_max: usize,
    data: Vec<u32>,
}

impl LevelCounts {
    fn at(&self, k: usize, pw: usize, l: i32) -> u32 {
        if l > L_MAX {
            return 0;
        }
        let li = (l.max(L_MIN) - L_MIN) as usize;
        self.data[(k * (self.pw_max + 1) + pw) * NL + li]
    }
}

/// Counts of one depth: for each detector spacing `pw` and level `L`, the number of residue
/// classes modulo `pw` (one per point of a detector box) that some detector of the lattice
/// sees with a coefficient level of at least `L`.
fn depth_counts(row: &CoeffRow, u: usize, sources: &[usize], pw_max: usize) -> Vec<u32> {
    let dims = row.dims();
    let levels: Vec<(Vec<i32>, i32)> = (0..row.block_len())
        .filter_map(|i| {
            let o = row.offset_of(i);
            let l = level_at(row, u, sources, &o)?;
            (l >= L_MIN).then(|| (o, l.min(L_MAX)))
        })
        .collect();
    let per_pw: Vec<Vec<u32>> = (1..=pw_max)
        .into_par_iter()
        .map(|pw| {
            let cells = pw.pow(dims as u32);
            let mut best = vec![i32::MIN; cells];
            for (o, l) in &levels {
                let mut idx = 0usize;
                for &x in o {
                    idx = idx * pw + x.rem_euclid(pw as i32) as usize;
                }
                best[idx] = best[idx].max(*l);
            }
            let mut hist = vec![0u32; NL];
            for &b in &best {
                if b != i32::MIN {
                    hist[(b - L_MIN) as usize] += 1;
                }
            }
            let mut acc = 0u32;
            for li in (0..NL).rev() {
                acc += hist[li];
                hist[li] = acc;
            }
            hist
        })
        .collect();
    let mut out = vec![0u32; NL];
    for h in per_pw {
        out.extend(h);
    }
    out
}

/// Streams rows either from a stored table or by unrolling on the fly.
pub enum RowFeed<'a> {
    Table(&'a CoeffTable),
    Stream(Box<RowStream>),
    /// Unrolls on the fly and writes every row past the identity to a table file.
    Recorded(Box<RowStream>, TableWriter),
}

impl RowFeed<'_> {
    fn for_each(self, tmax: usize, mut f: impl FnMut(&CoeffRow) -> Result<()>) -> Result<()> {
        match self {
            RowFeed::Table(t) => {
                if t.tmax < tmax {
                    return Err(Error::TstepOutOfRange { t: tmax, tmax: t.tmax });
                }
                for k in 0..=tmax {
                    f(t.row(k)?)?;
                }
            }
            RowFeed::Stream(mut s) => {
                f(s.current())?;
                for _ in 0..tmax {
                    f(s.advance())?;
                }
            }
            RowFeed::Recorded(mut s, mut w) => {
                f(s.current())?;
                for _ in 0..tmax {
                    let row = s.advance();
                    w.write_row(row)?;
                    f(row)?;
                }
                w.finish()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    t: usize,
    rho: usize,
    pw: i32,
    cost: f64,
    coverage: f64,
    ew_volume: u64,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    use std::cmp::Ordering::*;
    match a.cost.partial_cmp(&b.cost).unwrap_or(Equal) {
        Less => return true,
        Greater => return false,
        Equal => {}
    }
    if a.rho != b.rho {
        return a.rho > b.rho;
    }
    if a.t != b.t {
        return a.t < b.t;
    }
    if a.ew_volume != b.ew_volume {
        return a.ew_volume < b.ew_volume;
    }
    a.pw > b.pw
}

/// Profiles the spec over `1..=tmax` and selects, for every (width, udp, coverage) cell, the
/// cheapest configuration that meets the coverage goal.
pub fn offline_profile(
    spec: &StencilSpec,
    rows: RowFeed<'_>,
    tmax: usize,
    exp_set: &[u32],
    udp_set: &[u32],
    cov_set: &[u32],
    model: &FloatModel,
) -> Result<ConfigLUT> {
    spec.validate()?;
    if tmax == 0 {
        return Err(Error::InvalidSpec("Tmax must be at least 1".into()));
    }
    if let Some(&w) = exp_set.iter().find(|&&w| w > EXP_MAX) {
        return Err(Error::ExponentRangeUnprofiled(w));
    }
    let targets = spec.detector_targets();
    if targets.is_empty() {
        return Err(Error::InvalidSpec("no array evolves under the stencil".into()));
    }
    let sources = spec.state_arrays();
    let dims = spec.dims;
    let width = spec.width();
    let extent = spec.extent();
    let wmax = width.iter().copied().max().unwrap_or(0).max(1) as usize;
    let pw_max = (2 * wmax * tmax + 1).min(extent.iter().copied().min().unwrap_or(1));
    let exp_norm: Vec<u32> = exp_set.iter().map(|&w| w.max(1)).collect();

    let mut sums = PathSums::new(spec.arrays);
    let nt = targets.len();
    // info[target][k][width index]
    let mut info: Vec<Vec<Vec<DepthInfo>>> = vec![Vec::with_capacity(tmax + 1); nt];
    let mut counts: Vec<LevelCounts> =
        (0..nt).map(|_| LevelCounts { pw_max, data: Vec::with_capacity((tmax + 1) * (pw_max + 1) * NL) }).collect();

    rows.for_each(tmax, |row| {
        sums.push_row(row);
        let k = row.k;
        for (ti, &u) in targets.iter().enumerate() {
            let per_w: Vec<DepthInfo> = if k == 0 {
                exp_norm.iter().map(|_| DepthInfo { e_top: None, dp: 0, ew: EssentialWidth::full(&row.radius) }).collect()
            } else {
                let boxes = BoxSums::new(row, u);
                exp_norm
                    .par_iter()
                    .map(|&w| {
                        let Some(e_top) = sums.top_exponent(k, u, w) else {
                            return DepthInfo { e_top: None, dp: 0, ew: EssentialWidth::full(&row.radius) };
                        };
                        let te_s = iterated_abs_bound(spec, &sums, u, k, w, model);
                        let rs = combine(te_s, 0.0, e_top, model).rs;
                        let dp_s = detector_precision(rs, 0.0, model);
                        let trim = trim_support(&boxes, w, (dp_s + 2).max(1));
                        let te_d = direct_abs_for_trim(&boxes, &trim, w, model);
                        let est = combine(te_s, te_d, e_top, model);
                        DepthInfo { e_top: Some(e_top), dp: est.dp, ew: trim.ew }
                    })
                    .collect()
            };
            info[ti].push(per_w);
            let c = depth_counts(row, u, &sources, pw_max);
            let data = &mut counts[ti].data;
            if k == 0 {
                data.extend_from_slice(&c);
            } else {
                let base = (k - 1) * (pw_max + 1) * NL;
                for (i, v) in c.into_iter().enumerate() {
                    let prev = data[base + i];
                    data.push(prev + v);
                }
            }
        }
        Ok(())
    })?;

    let n_w = exp_set.len();
    let n_u = udp_set.len();
    let n_c = cov_set.len();
    let cells = n_w * n_u * n_c;
    let cell = |wi: usize, ui: usize, ci: usize| (wi * n_u + ui) * n_c + ci;

    let best: Vec<Option<Candidate>> = (1..=tmax)
        .into_par_iter()
        .fold(
            || vec![None; cells],
            |mut acc: Vec<Option<Candidate>>, t| {
                let interior = interior_fraction(&extent, &width, t);
                let in_cov: Vec<Option<f64>> = cov_set.iter().map(|&c| adjust_coverage(c as f64 / 100.0, interior).ok()).collect();
                if in_cov.iter().all(|c| c.is_none()) {
                    return acc;
                }
                let pw_cap =
                    extent.iter().zip(&width).map(|(&n, &w)| n as i64 - 2 * w as i64 * t as i64).min().unwrap_or(1).clamp(1, pw_max as i64)
                        as usize;
                // Group (width, udp) pairs by their per-target protection levels.
                let mut groups: BTreeMap<Vec<i32>, Vec<(usize, usize, u32)>> = BTreeMap::new();
                for (wi, _) in exp_set.iter().enumerate() {
                    let mut dp = u32::MAX;
                    let mut tops = Vec::with_capacity(nt);
                    for inf in &info {
                        let d = &inf[t][wi];
                        match d.e_top {
                            Some(e) => tops.push(e),
                            None => dp = 0,
                        }
                        dp = dp.min(d.dp);
                    }
                    if dp == 0 || tops.len() != nt {
                        continue;
                    }
                    for (ui, &udp) in udp_set.iter().enumerate() {
                        if udp == 0 || udp > dp {
                            continue;
                        }
                        let key: Vec<i32> = tops.iter().map(|e| e - dp as i32 + udp as i32).collect();
                        groups.entry(key).or_default().push((wi, ui, dp));
                    }
                }
                let mut frac = vec![0.0f64; pw_cap + 1];
                let mut smax = vec![0.0f64; pw_cap + 2];
                for rho in (t / 2 + 1)..=t {
                    for (levels, members) in &groups {
                        for (pw, slot) in frac.iter_mut().enumerate().skip(1) {
                            let vol = rho as f64 * (pw as f64).powi(dims as i32);
                            let mut f = f64::INFINITY;
                            for (ti, c) in counts.iter().enumerate() {
                                let n = c.at(t, pw, levels[ti]) - c.at(t - rho, pw, levels[ti]);
                                f = f.min(n as f64 / vol);
                            }
                            *slot = f;
                        }
                        smax[pw_cap + 1] = f64::NEG_INFINITY;
                        for pw in (1..=pw_cap).rev() {
                            smax[pw] = smax[pw + 1].max(frac[pw]);
                        }
                        for (ci, target) in in_cov.iter().enumerate() {
                            let Some(target) = *target else { continue };
                            if smax[1] < target {
                                continue;
                            }
                            // Largest pw whose suffix maximum still meets the target.
                            let (mut a, mut b) = (1usize, pw_cap);
                            while a < b {
                                let m = (a + b).div_ceil(2);
                                if smax[m] >= target {
                                    a = m;
                                } else {
                                    b = m - 1;
                                }
                            }
                            let pw = a;
                            for &(wi, ui, _) in members {
                                let ew = info.iter().map(|inf| inf[t][wi].ew.clone()).reduce(|a, b| a.union(&b)).unwrap();
                                let cand = Candidate {
                                    t,
                                    rho,
                                    pw: pw as i32,
                                    cost: config_cost(&ew, &vec![pw as i32; dims], rho),
                                    coverage: interior * frac[pw],
                                    ew_volume: ew.volume(),
                                };
                                let slot = &mut acc[cell(wi, ui, ci)];
                                if slot.as_ref().is_none_or(|b| better(&cand, b)) {
                                    *slot = Some(cand);
                                }
                            }
                        }
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![None; cells],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    if let Some(y) = y {
                        if x.as_ref().is_none_or(|x| better(&y, x)) {
                            *x = Some(y);
                        }
                    }
                }
                a
            },
        );

    let mut entries = BTreeMap::new();
    for (wi, &w) in exp_set.iter().enumerate() {
        for (ui, &udp) in udp_set.iter().enumerate() {
            for (ci, &cov) in cov_set.iter().enumerate() {
                let key = lut_key(w, udp, cov);
                let value = match &best[cell(wi, ui, ci)] {
                    None => LutCell::Infeasible("infeasible".into()),
                    Some(c) => {
                        let dp = info.iter().map(|inf| inf[c.t][wi].dp).min().unwrap();
                        let ew = info.iter().map(|inf| inf[c.t][wi].ew.clone()).reduce(|a, b| a.union(&b)).unwrap();
                        LutCell::Config(DetectorConfig {
                            t: c.t,
                            rho: c.rho,
                            dp,
                            pw: vec![c.pw; dims],
                            ewl: ew.left,
                            ewr: ew.right,
                            cost: c.cost,
                            coverage: c.coverage,
                            targets: targets.clone(),
                            e_top: info.iter().map(|inf| inf[c.t][wi].e_top.unwrap()).collect(),
                        })
                    }
                };
                entries.insert(key, value);
            }
        }
    }
    Ok(ConfigLUT {
        meta: LutMeta {
            spec_hash: spec.structure_hash().iter().map(|b| format!("{b:02x}")).collect(),
            extent,
            tmax,
            exp_set: exp_set.to_vec(),
            udp_set: udp_set.to_vec(),
            cov_set: cov_set.to_vec(),
            model: *model,
        },
        entries,
    })
}

/// Default sweep: widths 1..=20, udp 1..=40, coverage 0..=100 in steps of 5.
pub fn default_sets() -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    ((1..=EXP_MAX).collect(), (1..=40).collect(), (0..=100).step_by(5).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::build_benchmark;
    use crate::coeffs::unroll_coefficients;
    use crate::stencil::{BoundaryCondition, PairTerms};

    fn heat1d(n: i64) -> StencilSpec {
        StencilSpec {
            dims: 1,
            arrays: 1,
            lower: vec![0],
            upper: vec![n - 1],
            pairs: vec![PairTerms { to: 0, from: 0, offsets: vec![vec![-1], vec![0], vec![1]], coeffs: vec![0.25, 0.5, 0.25] }],
            boundary: BoundaryCondition::constant(vec![1.0]),
        }
    }

    fn pts(v: &[(f64, f64)]) -> WeightedSupport {
        let n = v.len();
        support_from_points(vec![vec![0]; n], vec![ExtendedFloat::ONE; n], v.iter().map(|&(a, b)| Interval::new(a, b)).collect())
    }

    #[test]
    fn single_point_support() {
        let row = CoeffRow::identity(1, 1);
        let s = build_support(&row, 0, 1);
        assert_eq!(s.total, Interval::new(1.0, 2.0));
        assert_eq!(s.partial[0], Interval::ZERO);
        assert_eq!(max_contrib(&s, 0, 53), 53);
    }

    #[test]
    fn two_halves_sum_to_the_input_interval() {
        let s = pts(&[(0.5, 1.0), (0.5, 1.0)]);
        assert_eq!(s.total, Interval::new(1.0, 2.0));
    }

    #[test]
    fn heat_two_step_support_matches_pointwise_sums() {
        let t = unroll_coefficients(&heat1d(32), 2).unwrap();
        let s = build_support(t.row(2).unwrap(), 0, 1);
        let c = [0.0625, 0.25, 0.375, 0.25, 0.0625];
        let lo: f64 = c.iter().sum();
        assert_eq!(s.total, Interval::new(lo, 2.0 * lo));
        for (i, p) in s.partial.iter().enumerate() {
            let rest: f64 = c.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).sum();
            assert_eq!(*p, Interval::new(rest, 2.0 * rest));
            assert!((*p + s.points[i]).encloses(&s.total));
        }
    }

    #[test]
    fn contribution_examples() {
        let s = pts(&[(pow2(-60), pow2(-59)), (1.0, 1.5)]);
        assert_eq!(max_contrib(&s, 0, 53), -6);
        assert_eq!(max_contrib(&s, 1, 53), 53);
        let s = pts(&[(pow2(-10), pow2(-9)), (0.5, 1.0)]);
        assert_eq!(min_contrib(&s, 0, 45), 35);
        let s = pts(&[(1.0, 1.5), (0.5, 1.0)]);
        assert_eq!(min_contrib(&s, 0, 45), 45);
        assert!(min_contrib(&s, 0, 0) <= 0);
    }

    /// Retained interval and excluded magnitude computed point by point.
    fn brute_gap(row: &CoeffRow, ew: &EssentialWidth, w: u32) -> i64 {
        let top = pow2(w as i32);
        let (mut lo, mut hi, mut ex) = (0.0f64, 0.0f64, 0.0f64);
        for (o, c) in row.nonzero(0, 0) {
            let c = c.to_f64();
            if ew.contains(&o) {
                lo += (c * 1.0).min(c * top);
                hi += (c * 1.0).max(c * top);
            } else {
                ex += c.abs() * top;
            }
        }
        let mig = if lo > 0.0 {
            lo
        } else if hi < 0.0 {
            -hi
        } else {
            0.0
        };
        exp_gap(exponent(mig), exponent(ex))
    }

    #[test]
    fn heat_essential_width_is_minimal_and_valid() {
        let t = unroll_coefficients(&heat1d(512), 64).unwrap();
        let row = t.row(64).unwrap();
        let ew = essential_width(row, 0, 1, 45);
        assert!(ew.volume() < 129);
        assert!(brute_gap(row, &ew, 1) >= 45);
        // Trimming one more point on either side breaks the inequality.
        for side in 0..2 {
            let mut e = ew.clone();
            if side == 0 {
                e.left[0] -= 1
            } else {
                e.right[0] -= 1
            }
            assert!(brute_gap(row, &e, 1) < 45, "side {side} still trimmable");
        }
    }

    #[test]
    fn full_precision_keeps_everything() {
        let t = unroll_coefficients(&heat1d(64), 6).unwrap();
        assert_eq!(essential_width(t.row(6).unwrap(), 0, 1, 53), EssentialWidth::full(&[6]));
    }

    #[test]
    fn wave_keeps_its_full_support() {
        let b = build_benchmark("w1", 64).unwrap();
        let t = unroll_coefficients(&b.spec, 8).unwrap();
        let row = t.row(8).unwrap();
        assert_eq!(essential_width(row, 0, 1, 40), EssentialWidth::full(&row.radius));
    }

    /// Box-by-box oracle of the protected width.
    fn oracle_pw(t: &CoeffTable, tt: usize, rho: usize, level: i32) -> i32 {
        let ok = |o: i32| (0..rho).all(|s| exponent(t.row(tt - s).unwrap().get(0, 0, &[o]).to_f64().abs()).is_some_and(|e| e >= level));
        let mut pw = 0;
        while (pw_bounds(pw + 1).0..=pw_bounds(pw + 1).1).all(ok) {
            pw += 1;
        }
        pw
    }

    #[test]
    fn protected_width_matches_box_oracle_and_shrinks_with_udp() {
        let s = heat1d(128);
        let t = unroll_coefficients(&s, 12).unwrap();
        let mut prev = i32::MAX;
        for udp in [1, 5, 10, 20, 30, 40] {
            let r = protected_width(&s, &t, 0, 12, 4, 45, udp, 1);
            let want = oracle_pw(&t, 12, 4, 1 - 45 + udp as i32);
            match r {
                Ok(pw) => {
                    assert_eq!(pw[0], want);
                    assert!(pw[0] <= prev);
                    prev = pw[0];
                }
                Err(Error::EmptyProtectedRegion) => {
                    assert_eq!(want, 0);
                    prev = 0;
                }
                Err(e) => panic!("{e}"),
            }
        }
        assert!(matches!(protected_width(&s, &t, 0, 12, 4, 10, 11, 1), Err(Error::EmptyProtectedRegion)));
    }

    #[test]
    fn coverage_arithmetic() {
        assert!((interior_fraction(&[10000, 10000], &[1, 1], 256) - 0.9002).abs() < 1e-4);
        assert_eq!(interior_fraction(&[100, 100], &[1, 1], 0), 1.0);
        assert!((interior_fraction(&[1000], &[1], 64) - 0.872).abs() < 1e-12);
        assert_eq!(interior_fraction(&[10], &[1], 6), 0.0);
        assert_eq!(coverage_fraction(0.5, &[1000], &[1], 64), 0.436);
        assert!((adjust_coverage(0.9, 0.9002).unwrap() - 0.99978).abs() < 1e-5);
        assert!(matches!(adjust_coverage(0.95, 0.9), Err(Error::UnsupportedCoverage)));
        assert_eq!(adjust_coverage(0.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn cost_arithmetic() {
        let e1 = EssentialWidth { left: vec![10], right: vec![9] };
        assert_eq!(config_cost(&e1, &[4], 10), 0.5);
        assert_eq!(config_cost(&e1, &[20], 1), 1.0);
        let e2 = EssentialWidth { left: vec![31, 31], right: vec![31, 31] };
        assert!((config_cost(&e2, &[14, 14], 128) - 0.158).abs() < 1e-3);
    }

    #[test]
    fn profile_is_deterministic_and_feeds_agree() {
        let s = heat1d(1024);
        let sets = (vec![1, 4], vec![10, 20], vec![0, 60, 90]);
        let m = FloatModel::binary64();
        let table = unroll_coefficients(&s, 48).unwrap();
        let a = offline_profile(&s, RowFeed::Table(&table), 48, &sets.0, &sets.1, &sets.2, &m).unwrap();
        let b = offline_profile(&s, RowFeed::Stream(Box::new(RowStream::new(&s))), 48, &sets.0, &sets.1, &sets.2, &m).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| offline_profile(&s, RowFeed::Table(&table), 48, &sets.0, &sets.1, &sets.2, &m).unwrap());
        assert_eq!(a, c);
        assert_eq!(a.entries.len(), 12);
        let back = ConfigLUT::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn profile_reports_infeasible_cells() {
        let s = heat1d(256);
        let lut =
            offline_profile(&s, RowFeed::Stream(Box::new(RowStream::new(&s))), 8, &[1], &[50], &[90], &FloatModel::binary64()).unwrap();
        assert_eq!(lut.entries["e1:u50:c90"], LutCell::Infeasible("infeasible".into()));
        let json = lut.to_json().unwrap();
        assert!(json.contains("\"e1:u50:c90\": \"infeasible\""));
    }

    /// Fraction of (look-back, residue) pairs seen by some lattice detector at the level.
    fn oracle_fraction(t: &CoeffTable, tt: usize, rho: usize, pw: i32, level: i32) -> f64 {
        let mut hit = 0;
        for s in 0..rho {
            let row = t.row(tt - s).unwrap();
            for r in 0..pw {
                let seen = (-row.radius[0]..=row.radius[0])
                    .filter(|o| o.rem_euclid(pw) == r)
                    .any(|o| exponent(row.get(0, 0, &[o]).to_f64().abs()).is_some_and(|e| e >= level));
                hit += seen as usize;
            }
        }
        hit as f64 / (rho as f64 * pw as f64)
    }

    #[test]
    fn selected_config_meets_its_goal() {
        let s = heat1d(2048);
        let m = FloatModel::binary64();
        let lut = offline_profile(&s, RowFeed::Stream(Box::new(RowStream::new(&s))), 40, &[1], &[15], &[80], &m).unwrap();
        let c = lut.cell(1, 15, 80).unwrap();
        let t = unroll_coefficients(&s, c.t).unwrap();
        let level = c.e_top[0] - c.dp as i32 + 15;
        let frac = oracle_fraction(&t, c.t, c.rho, c.pw[0], level);
        let interior = interior_fraction(&[2048], &[1], c.t);
        assert!((c.coverage - interior * frac).abs() < 1e-12);
        assert!(c.coverage >= 0.8);
        assert!(c.rho <= c.t && 2 * c.rho > c.t);
        assert!((c.cost - config_cost(&c.ew(), &c.pw, c.rho)).abs() < 1e-15);
        // One wider spacing fails the goal.
        let wider = interior * oracle_fraction(&t, c.t, c.rho, c.pw[0] + 1, level);
        assert!(wider < 0.8 || c.pw[0] + 1 > 2048);
    }

    #[test]
    fn lookup_rounds_width_and_coverage_up() {
        let s = heat1d(1024);
        let m = FloatModel::binary64();
        let lut = offline_profile(&s, RowFeed::Stream(Box::new(RowStream::new(&s))), 16, &[1, 4], &[10], &[50, 80], &m).unwrap();
        assert_eq!(lut.lookup(0, 10, 0.5).unwrap(), lut.cell(1, 10, 50).unwrap());
        assert_eq!(lut.lookup(2, 10, 0.51).unwrap(), lut.cell(4, 10, 80).unwrap());
        assert!(matches!(lut.lookup(5, 10, 0.5), Err(Error::ExponentRangeUnprofiled(5))));
        assert!(matches!(lut.lookup(1, 10, 0.9), Err(Error::UnsupportedCoverage)));
    }
}
