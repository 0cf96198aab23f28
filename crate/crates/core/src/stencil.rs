//! Multi-array D-dimensional linear stencils and their step-by-step (iterated) evaluation.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::float::exponent;

/// Boundary value callback: `(array, grid point, time step) -> value`.
///
/// For Neumann boundaries the point is the out-of-domain ghost point and the value is the
/// outward normal derivative on the face it crosses.
pub type ValueFn = Arc<dyn Fn(usize, &[i64], u64) -> f64 + Send + Sync>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryKind {
    DirichletFixed,
    DirichletTimeDependent,
    Neumann,
}

#[derive(Clone)]
pub enum BoundaryValues {
    /// One constant per array.
    Constant(Vec<f64>),
    Function(ValueFn),
}

impl fmt::Debug for BoundaryValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundaryCondition {
    pub kind: BoundaryKind,
    pub values: BoundaryValues,
    /// Grid spacing used by the Neumann ghost-point substitution.
    pub spacing: f64,
}

impl BoundaryCondition {
    pub fn constant(values: Vec<f64>) -> Self {
        Self { kind: BoundaryKind::DirichletFixed, values: BoundaryValues::Constant(values), spacing: 1.0 }
    }

    pub fn function(kind: BoundaryKind, spacing: f64, f: ValueFn) -> Self {
        Self { kind, values: BoundaryValues::Function(f), spacing }
    }

    pub fn value(&self, array: usize, point: &[i64], t: u64) -> f64 {
        match &self.values {
            BoundaryValues::Constant(v) => v.get(array).copied().unwrap_or(0.0),
            BoundaryValues::Function(f) => f(array, point, t),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BoundaryDoc {
    kind: BoundaryKind,
    values: Option<Vec<f64>>,
    #[serde(default = "one")]
    spacing: f64,
}

fn one() -> f64 {
    1.0
}

impl Serialize for BoundaryCondition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let values = match &self.values {
            BoundaryValues::Constant(v) => Some(v.clone()),
            BoundaryValues::Function(_) => None,
        };
        BoundaryDoc { kind: self.kind, values, spacing: self.spacing }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundaryCondition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = BoundaryDoc::deserialize(d)?;
        let values = doc.values.ok_or_else(|| serde::de::Error::custom("boundary `values` must list one constant per array"))?;
        Ok(Self { kind: doc.kind, values: BoundaryValues::Constant(values), spacing: doc.spacing })
    }
}

/// All terms that feed array `to` from array `from`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTerms {
    pub to: usize,
    pub from: usize,
    pub offsets: Vec<Vec<i32>>,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StencilSpec {
    pub dims: usize,
    pub arrays: usize,
    pub lower: Vec<i64>,
    pub upper: Vec<i64>,
    pub pairs: Vec<PairTerms>,
    pub boundary: BoundaryCondition,
}

/// One term of a single-step update, in evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub from: usize,
    pub offset: Vec<i32>,
    pub coeff: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ArrayRole {
    /// Evolves under the stencil and is protected by detectors.
    State,
    /// Time-invariant input such as a forcing term.
    Source,
    /// Exact copy of another array (previous time level).
    Copy(usize),
}

impl StencilSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.dims == 0 {
            return bad("dims must be positive".into());
        }
        if self.arrays == 0 {
            return bad("at least one array is required".into());
        }
        if self.lower.len() != self.dims || self.upper.len() != self.dims {
            return bad("lower/upper must have one entry per dimension".into());
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l >= u) {
            return bad("lower must be strictly below upper".into());
        }
        for p in &self.pairs {
            if p.to >= self.arrays || p.from >= self.arrays {
                return bad(format!("pair ({}, {}) names a missing array", p.to, p.from));
            }
            if p.offsets.len() != p.coeffs.len() {
                return bad(format!("pair ({}, {}) has mismatched offsets and coeffs", p.to, p.from));
            }
            if p.offsets.iter().any(|o| o.len() != self.dims) {
                return bad(format!("pair ({}, {}) has an offset of the wrong dimension", p.to, p.from));
            }
            if p.coeffs.iter().any(|c| !c.is_finite()) {
                return bad("coefficients must be finite".into());
            }
        }
        for x in 0..self.arrays {
            if self.terms(x).is_empty() {
                return bad(format!("array {x} has no update terms"));
            }
        }
        if let BoundaryValues::Constant(v) = &self.boundary.values {
            if v.len() != self.arrays {
                return bad("constant boundary needs one value per array".into());
            }
        }
        Ok(())
    }

    /// Per-dimension reach `w`.
    pub fn width(&self) -> Vec<i32> {
        let mut w = vec![0; self.dims];
        for p in &self.pairs {
            for o in &p.offsets {
                for (wj, &oj) in w.iter_mut().zip(o) {
                    *wj = (*wj).max(oj.abs());
                }
            }
        }
        w
    }

    pub fn extent(&self) -> Vec<usize> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l + 1) as usize).collect()
    }

    /// Terms feeding array `x`, in the order the iterated evaluation sums them.
    pub fn terms(&self, x: usize) -> Vec<Term> {
        let mut out = Vec::new();
        for p in self.pairs.iter().filter(|p| p.to == x) {
            for (o, &c) in p.offsets.iter().zip(&p.coeffs) {
                out.push(Term { from: p.from, offset: o.clone(), coeff: c });
            }
        }
        out
    }

    pub fn role(&self, x: usize) -> ArrayRole {
        let t = self.terms(x);
        if t.len() == 1 && t[0].coeff == 1.0 && t[0].offset.iter().all(|&o| o == 0) {
            if t[0].from == x {
                return ArrayRole::Source;
            }
            return ArrayRole::Copy(t[0].from);
        }
        ArrayRole::State
    }

    /// Arrays that carry detectors.
    pub fn detector_targets(&self) -> Vec<usize> {
        (0..self.arrays).filter(|&x| self.role(x) == ArrayRole::State).collect()
    }

    /// Arrays that evolve in time and may be corrupted (state and copy arrays).
    pub fn state_arrays(&self) -> Vec<usize> {
        (0..self.arrays).filter(|&x| self.role(x) != ArrayRole::Source).collect()
    }

    /// Stability gate: `|c| <= 1` everywhere and, per evolving target, the sum over
    /// non-source inputs is at most 1.
    pub fn check_stability(&self) -> Result<()> {
        for x in 0..self.arrays {
            let mut sum = 0.0;
            for t in self.terms(x) {
                if self.role(t.from) == ArrayRole::Source && t.from != x {
                    continue;
                }
                if t.coeff.abs() > 1.0 {
                    return Err(Error::UnstableDiscretization(format!("coefficient {} feeding array {x} exceeds 1 in magnitude", t.coeff)));
                }
                sum += t.coeff;
            }
            if sum > 1.0 + 1e-12 {
                return Err(Error::UnstableDiscretization(format!("coefficients feeding array {x} sum to {sum} > 1")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the dimensions, array count, offsets and coefficient bits.
    pub fn structure_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.dims as u64).to_le_bytes());
        h.update((self.arrays as u64).to_le_bytes());
        for x in 0..self.arrays {
            for t in self.terms(x) {
                h.update((x as u64).to_le_bytes());
                h.update((t.from as u64).to_le_bytes());
                for o in &t.offset {
                    h.update(o.to_le_bytes());
                }
                h.update(t.coeff.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Dense row-major storage for every array plus one scratch buffer per array.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    pub lower: Vec<i64>,
    pub extent: Vec<usize>,
    pub data: Vec<Vec<f64>>,
    pub time: u64,
    scratch: Vec<Vec<f64>>,
}

impl GridState {
    pub fn zeros(spec: &StencilSpec) -> Self {
        let extent = spec.extent();
        let n: usize = extent.iter().product();
        Self { lower: spec.lower.clone(), extent, data: vec![vec![0.0; n]; spec.arrays], time: 0, scratch: vec![vec![0.0; n]; spec.arrays] }
    }

    /// Fills every array from `f(array, point)`.
    pub fn from_fn(spec: &StencilSpec, f: impl Fn(usize, &[i64]) -> f64) -> Self {
        let mut g = Self::zeros(spec);
        let mut p = g.lower.clone();
        for idx in 0..g.len() {
            g.coords_into(idx, &mut p);
            for a in 0..spec.arrays {
                g.data[a][idx] = f(a, &p);
            }
        }
        g
    }

    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.extent.len()
    }

    pub fn in_range(&self, p: &[i64]) -> bool {
        p.iter().zip(&self.lower).zip(&self.extent).all(|((&x, &l), &e)| x >= l && x < l + e as i64)
    }

    pub fn index(&self, p: &[i64]) -> usize {
        let mut idx = 0usize;
        for ((&x, &l), &e) in p.iter().zip(&self.lower).zip(&self.extent) {
            idx = idx * e + (x - l) as usize;
        }
        idx
    }

    pub fn coords(&self, idx: usize) -> Vec<i64> {
        let mut p = vec![0; self.dims()];
        self.coords_into(idx, &mut p);
        p
    }

    pub fn coords_into(&self, mut idx: usize, p: &mut [i64]) {
        for j in (0..self.dims()).rev() {
            let e = self.extent[j];
            p[j] = self.lower[j] + (idx % e) as i64;
            idx /= e;
        }
    }

    pub fn get(&self, array: usize, p: &[i64]) -> f64 {
        self.data[array][self.index(p)]
    }

    pub fn set(&mut self, array: usize, p: &[i64], v: f64) {
        let i = self.index(p);
        self.data[array][i] = v;
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<isize> {
        let mut s = vec![1isize; self.dims()];
        for j in (0..self.dims().saturating_sub(1)).rev() {
            s[j] = s[j + 1] * self.extent[j + 1] as isize;
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    fn check_shape(&self, spec: &StencilSpec) -> Result<()> {
        if self.data.len() != spec.arrays || self.extent != spec.extent() || self.lower != spec.lower {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} arrays of extent {:?}, spec expects {} of {:?}",
                self.data.len(),
                self.extent,
                spec.arrays,
                spec.extent()
            )));
        }
        Ok(())
    }
}

/// Whether `p` lies at least `w` from every face, so the stencil reads stay in the domain.
pub fn is_interior(spec: &StencilSpec, w: &[i32], p: &[i64]) -> bool {
    p.iter().zip(&spec.lower).zip(&spec.upper).zip(w).all(|(((&x, &l), &u), &wj)| x >= l + wj as i64 && x <= u - wj as i64)
}

/// Evaluates one term list at a point whose reads all stay in the domain.
#[inline]
pub fn apply_terms(data: &[Vec<f64>], terms: &[(usize, isize, f64)], idx: usize) -> f64 {
    let (a, d, c) = terms[0];
    let mut acc = c * data[a][(idx as isize + d) as usize];
    for &(a, d, c) in &terms[1..] {
        acc += c * data[a][(idx as isize + d) as usize];
    }
    acc
}

/// Value of array `a` at `q`, substituting Neumann ghost values outside the domain.
fn read_with_ghost(spec: &StencilSpec, g: &GridState, a: usize, q: &[i64]) -> f64 {
    if g.in_range(q) {
        return g.get(a, q);
    }
    let mut m = q.to_vec();
    let mut dist = 0i64;
    for j in 0..q.len() {
        if q[j] < spec.lower[j] {
            dist += spec.lower[j] - q[j];
            m[j] = 2 * spec.lower[j] - q[j];
        } else if q[j] > spec.upper[j] {
            dist += q[j] - spec.upper[j];
            m[j] = 2 * spec.upper[j] - q[j];
        }
    }
    let m: Vec<i64> = m.iter().zip(&spec.lower).zip(&spec.upper).map(|((&x, &l), &u)| x.clamp(l, u)).collect();
    let dudn = spec.boundary.value(a, q, g.time);
    g.get(a, &m) + 2.0 * dist as f64 * spec.boundary.spacing * dudn
}

/// Linearized term lists per target array, for the given grid layout.
pub fn linear_terms(spec: &StencilSpec, g: &GridState) -> Vec<Vec<(usize, isize, f64)>> {
    let strides = g.strides();
    (0..spec.arrays)
        .map(|x| {
            spec.terms(x)
                .into_iter()
                .map(|t| {
                    let d: isize = t.offset.iter().zip(&strides).map(|(&o, &s)| o as isize * s).sum();
                    (t.from, d, t.coeff)
                })
                .collect()
        })
        .collect()
}

/// Value a boundary point of array `x` takes at time `t_new`, given the state at `t_new - 1`.
pub fn boundary_update(spec: &StencilSpec, g: &GridState, x: usize, p: &[i64], t_new: u64) -> f64 {
    match spec.boundary.kind {
        BoundaryKind::DirichletFixed | BoundaryKind::DirichletTimeDependent => spec.boundary.value(x, p, t_new),
        BoundaryKind::Neumann => {
            let terms = spec.terms(x);
            let mut q = p.to_vec();
            let mut acc = 0.0;
            for (k, t) in terms.iter().enumerate() {
                for j in 0..p.len() {
                    q[j] = p[j] + t.offset[j] as i64;
                }
                let v = t.coeff * read_with_ghost(spec, g, t.from, &q);
                acc = if k == 0 { v } else { acc + v };
            }
            acc
        }
    }
}

/// Grids at least this large update their rows in parallel.
const PARALLEL_POINTS: usize = 1 << 16;

/// One iterated step: every array is recomputed from the previous buffers, then swapped in.
pub fn step_iterated(state: &mut GridState, spec: &StencilSpec) -> Result<()> {
    state.check_shape(spec)?;
    let w = spec.width();
    let lin = linear_terms(spec, state);
    let n = state.len();
    let d = state.dims();
    let last = d - 1;
    let ext_last = state.extent[last];
    let lo_in = w[last] as usize;
    let hi_in = ext_last - w[last] as usize;
    let t_new = state.time + 1;
    let mut scratch = std::mem::take(&mut state.scratch);
    let st: &GridState = state;
    let fill = |x: usize, row: usize, out: &mut [f64]| {
        let mut p = st.lower.clone();
        st.coords_into(row, &mut p);
        let outer_interior = (0..last).all(|j| {
            let off = p[j] - st.lower[j];
            off >= w[j] as i64 && off < st.extent[j] as i64 - w[j] as i64
        });
        for (k, o) in out.iter_mut().enumerate() {
            let idx = row + k;
            if outer_interior && k >= lo_in && k < hi_in {
                *o = apply_terms(&st.data, &lin[x], idx);
            } else {
                p[last] = st.lower[last] + k as i64;
                *o = boundary_update(spec, st, x, &p, t_new);
            }
        }
    };
    for (x, out) in scratch.iter_mut().enumerate() {
        if n >= PARALLEL_POINTS {
            out.par_chunks_mut(ext_last).enumerate().for_each(|(r, chunk)| fill(x, r * ext_last, chunk));
        } else {
            out.chunks_mut(ext_last).enumerate().for_each(|(r, chunk)| fill(x, r * ext_last, chunk));
        }
    }
    std::mem::swap(&mut state.data, &mut scratch);
    state.scratch = scratch;
    state.time = t_new;
    Ok(())
}

pub fn run_iterated(state: &mut GridState, spec: &StencilSpec, steps: u64) -> Result<()> {
    for _ in 0..steps {
        step_iterated(state, spec)?;
    }
    Ok(())
}

/// Binary exponents of the smallest and largest nonzero magnitudes in the data.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentRange {
    pub e_min: i32,
    pub e_max: i32,
}

impl ExponentRange {
    /// Number of binades spanned, `e_max - e_min + 1`.
    pub fn width(&self) -> u32 {
        (self.e_max - self.e_min + 1) as u32
    }
}

pub fn scan_exponent_range(state: &GridState) -> Result<ExponentRange> {
    scan_arrays(state, 0..state.data.len())
}

/// Exponent range over a subset of arrays, ignoring zeros and non-finite values.
pub fn scan_arrays(state: &GridState, arrays: impl IntoIterator<Item = usize>) -> Result<ExponentRange> {
    let mut lo = i32::MAX;
    let mut hi = i32::MIN;
    for a in arrays {
        for &v in &state.data[a] {
            if !v.is_finite() {
                continue;
            }
            if let Some(e) = exponent(v) {
                lo = lo.min(e);
                hi = hi.max(e);
            }
        }
    }
    if lo > hi {
        return Err(Error::AllZeroInput);
    }
    Ok(ExponentRange { e_min: lo, e_max: hi })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn heat1d(n: i64, boundary: f64) -> StencilSpec {
        StencilSpec {
            dims: 1,
            arrays: 1,
            lower: vec![0],
            upper: vec![n - 1],
            pairs: vec![PairTerms { to: 0, from: 0, offsets: vec![vec![-1], vec![0], vec![1]], coeffs: vec![0.25, 0.5, 0.25] }],
            boundary: BoundaryCondition::constant(vec![boundary]),
        }
    }

    #[test]
    fn ones_are_a_fixed_point() {
        let s = heat1d(16, 1.0);
        let mut g = GridState::from_fn(&s, |_, _| 1.0);
        run_iterated(&mut g, &s, 10).unwrap();
        assert!(g.data[0].iter().all(|&v| v == 1.0));
        assert_eq!(g.time, 10);
    }

    #[test]
    fn impulse_spreads_to_the_coefficients() {
        let s = heat1d(11, 0.0);
        let mut g = GridState::from_fn(&s, |_, p| if p[0] == 5 { 1.0 } else { 0.0 });
        step_iterated(&mut g, &s).unwrap();
        assert_eq!(&g.data[0][4..7], &[0.25, 0.5, 0.25]);
        step_iterated(&mut g, &s).unwrap();
        assert_eq!(&g.data[0][3..8], &[0.0625, 0.25, 0.375, 0.25, 0.0625]);
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = heat1d(8, 0.0);
        let mut g = GridState::from_fn(&s, |_, p| p[0] as f64);
        let before = g.clone();
        run_iterated(&mut g, &s, 0).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = heat1d(8, 0.0);
        let mut g = GridState::zeros(&heat1d(9, 0.0));
        assert!(matches!(step_iterated(&mut g, &s), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn exponent_scan() {
        let s = heat1d(4, 0.0);
        let g = GridState::from_fn(&s, |_, p| [1.0, 1.5, 1.99, 1.25][p[0] as usize]);
        assert_eq!(scan_exponent_range(&g).unwrap().width(), 1);
        let g = GridState::from_fn(&s, |_, p| [1.5 * 8.0, 0.0, 1.25 * 1024.0, 100.0][p[0] as usize]);
        let r = scan_exponent_range(&g).unwrap();
        assert_eq!((r.e_min, r.e_max, r.width()), (3, 10, 8));
        let g = GridState::zeros(&s);
        assert!(matches!(scan_exponent_range(&g), Err(Error::AllZeroInput)));
    }

    #[test]
    fn json_round_trip() {
        let s = heat1d(8, 2.0);
        let t = StencilSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(t.pairs, s.pairs);
        assert_eq!(t.structure_hash(), s.structure_hash());
        assert_eq!(t.boundary.value(0, &[0], 5), 2.0);
    }

    #[test]
    fn roles_and_stability() {
        let s = heat1d(8, 0.0);
        assert_eq!(s.role(0), ArrayRole::State);
        s.check_stability().unwrap();
        let mut bad = s.clone();
        bad.pairs[0].coeffs = vec![0.5, 0.5, 0.5];
        assert!(matches!(bad.check_stability(), Err(Error::UnstableDiscretization(_))));
    }
}
