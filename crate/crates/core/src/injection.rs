//! Fault injection: bit flips in grid data, loop-bound and array-access bugs in an internal
//! tiled executor, loop reorders, and campaigns that tally reach, manifestation and
//! detection against a clean reference run.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::build_benchmark;
use crate::error::{Error, Result};
use crate::runtime::{csv_err, matched_bits, select_config, Goal, Hooks, Protector, RunOptions, RunReport};
use crate::stencil::{boundary_update, is_interior, GridState, StencilSpec};
use crate::synthesis::{ConfigLUT, DetectorConfig};

/// XOR of one bit of the binary64 representation.
pub fn flip_bit(value: f64, bit: u32) -> f64 {
    assert!(bit < 64, "bit {bit} outside a binary64 word");
    f64::from_bits(value.to_bits() ^ (1u64 << bit))
}

/// Bits covered by a `udp`-bit guarantee: sign, exponent and the leading `udp - 1` explicit
/// mantissa bits (the implicit leading one counts as the first).
pub fn protected_bits(udp: u32) -> std::ops::Range<u32> {
    53u32.saturating_sub(udp).min(52)..64
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultMode {
    SingleBit,
    DoubleBitIn16ByteSection,
}

/// One soft fault. `SingleBit` flips `bits[0]` (0..64) of element `index`; the double-bit
/// mode flips two distinct bits (0..128) of the 16-byte section `index`, i.e. elements
/// `2 index` and `2 index + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftFaultPlan {
    pub mode: FaultMode,
    pub time_step: u64,
    pub array: usize,
    pub index: usize,
    pub bits: Vec<u32>,
    pub seed: u64,
}

impl SoftFaultPlan {
    /// `(element, bit)` pairs the plan flips, validated against `state`.
    fn targets(&self, state: &GridState) -> Result<Vec<(usize, u32)>> {
        let bad = |m: String| Error::LocationOutOfRange(m);
        let len = state.data.get(self.array).map(|a| a.len()).ok_or_else(|| bad(format!("array {}", self.array)))?;
        match self.mode {
            FaultMode::SingleBit => match self.bits[..] {
                [b] if b < 64 && self.index < len => Ok(vec![(self.index, b)]),
                _ => Err(bad(format!("element {} bits {:?}", self.index, self.bits))),
            },
            FaultMode::DoubleBitIn16ByteSection => match self.bits[..] {
                [a, b] if a != b && a < 128 && b < 128 => {
                    let t: Vec<(usize, u32)> = [a, b].iter().map(|&x| (2 * self.index + (x / 64) as usize, x % 64)).collect();
                    if t.iter().all(|&(i, _)| i < len) {
                        Ok(t)
                    } else {
                        Err(bad(format!("section {} bits {:?}", self.index, self.bits)))
                    }
                }
                _ => Err(bad(format!("section {} bits {:?}", self.index, self.bits))),
            },
        }
    }
}

/// Applies a soft fault to the state at the plan's time step.
pub fn inject_soft_fault(state: &mut GridState, plan: &SoftFaultPlan) -> Result<()> {
    if state.time != plan.time_step {
        return Err(Error::TimeMismatch { now: state.time, target: plan.time_step });
    }
    for (i, b) in plan.targets(state)? {
        let v = &mut state.data[plan.array][i];
        *v = flip_bit(*v, b);
    }
    Ok(())
}

/// Loop-bound mutation: the selected site returns `x + 1` for even ids and `x - 1` for odd.
pub fn bound_hook(site: usize, x: i64, selected: Option<usize>) -> i64 {
    match selected {
        Some(s) if s == site => {
            if site.is_multiple_of(2) {
                x + 1
            } else {
                x - 1
            }
        }
        _ => x,
    }
}

/// Array-access mutation: the selected site halves its subscript.
pub fn access_hook(site: usize, index: i64, selected: Option<usize>) -> i64 {
    match selected {
        Some(s) if s == site => index / 2,
        _ => index,
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BugKind {
    LoopBound,
    ArrayAccess,
    LoopReorder,
}

/// A software-bug site: a hooked loop bound or array subscript, or a reorder variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugSite {
    pub kind: BugKind,
    pub site_id: usize,
    pub variant: Option<String>,
}

/// One loop of the tiled nest: the time loop within a time tile, the tile loop of a
/// dimension, or the point loop within a tile.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loop {
    Time,
    Tile(usize),
    Point(usize),
}

fn canonical_loops(dims: usize) -> Vec<Loop> {
    let mut v = vec![Loop::Time];
    v.extend((0..dims).map(Loop::Tile));
    v.extend((0..dims).map(Loop::Point));
    v
}

/// A named loop-order variant: a permutation of the nest, loops run backwards, and an
/// optional reversal of the per-array statements in the body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reorder {
    pub name: String,
    pub order: Vec<Loop>,
    pub reversed: Vec<Loop>,
    pub statements_reversed: bool,
}

impl Reorder {
    fn new(order: Vec<Loop>, reversed: Vec<Loop>, statements_reversed: bool) -> Self {
        let tag = |l: &Loop| {
            let s = match l {
                Loop::Time => "t".to_string(),
                Loop::Tile(j) => format!("T{j}"),
                Loop::Point(j) => format!("p{j}"),
            };
            if reversed.contains(l) {
                format!("~{s}")
            } else {
                s
            }
        };
        let mut name: Vec<String> = order.iter().map(tag).collect();
        if statements_reversed {
            name.push("rs".into());
        }
        Self { name: name.join("."), order, reversed, statements_reversed }
    }
}

/// The curated fifteen loop-order variants for a nest of the given dimensionality. Some
/// commute with the stencil's dependences and some violate them.
pub fn reorder_variants(dims: usize) -> Vec<Reorder> {
    use Loop::*;
    let r = Reorder::new;
    if dims >= 2 {
        let rest: Vec<Loop> = (2..dims).flat_map(|j| [Tile(j), Point(j)]).collect();
        let with = |head: Vec<Loop>| -> Vec<Loop> { head.into_iter().chain(rest.iter().copied()).collect() };
        vec![
            r(with(vec![Time, Tile(0), Tile(1), Point(1), Point(0)]), vec![], false),
            r(with(vec![Time, Tile(1), Tile(0), Point(0), Point(1)]), vec![], false),
            r(with(vec![Time, Tile(1), Tile(0), Point(1), Point(0)]), vec![], false),
            r(with(vec![Time, Tile(0), Point(0), Tile(1), Point(1)]), vec![], false),
            r(with(vec![Time, Tile(1), Point(1), Tile(0), Point(0)]), vec![], false),
            r(with(vec![Time, Tile(0), Tile(1), Point(0), Point(1)]), vec![Point(0)], false),
            r(with(vec![Time, Tile(0), Tile(1), Point(0), Point(1)]), vec![], true),
            r(with(vec![Tile(0), Time, Tile(1), Point(0), Point(1)]), vec![], false),
            r(with(vec![Tile(1), Time, Tile(0), Point(0), Point(1)]), vec![], false),
            r(with(vec![Tile(0), Tile(1), Time, Point(0), Point(1)]), vec![], false),
            r(with(vec![Tile(0), Tile(1), Point(0), Time, Point(1)]), vec![], false),
            r(with(vec![Tile(0), Tile(1), Point(0), Point(1), Time]), vec![], false),
            r(with(vec![Tile(1), Tile(0), Time, Point(1), Point(0)]), vec![], false),
            r(with(vec![Time, Tile(0), Tile(1), Point(0), Point(1)]), vec![Time], false),
            r(with(vec![Tile(0), Point(0), Time, Tile(1), Point(1)]), vec![], false),
        ]
    } else {
        let orders = [vec![Time, Tile(0), Point(0)], vec![Tile(0), Time, Point(0)], vec![Tile(0), Point(0), Time]];
        let revs: Vec<Vec<Loop>> = vec![vec![], vec![Point(0)], vec![Tile(0)], vec![Tile(0), Point(0)], vec![Time], vec![Time, Point(0)]];
        let mut v = Vec::new();
        for rev in &revs {
            for o in &orders {
                if rev.is_empty() && o[0] == Time {
                    continue;
                }
                v.push(r(o.clone(), rev.clone(), false));
            }
        }
        v.truncate(14);
        v.push(r(orders[0].clone(), vec![], true));
        v
    }
}

/// Time-tile length and per-dimension space-tile sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileShape {
    pub time: usize,
    pub space: Vec<usize>,
}

impl TileShape {
    pub fn uniform(dims: usize, time: usize, space: usize) -> Self {
        Self { time, space: vec![space; dims] }
    }
}

/// Tiled loop-nest executor with every loop bound and array subscript routed through the
/// injection hooks. Without a bug or reorder it reproduces the reference step bit for bit.
#[derive(Clone, Debug)]
pub struct TiledVariant {
    pub spec: StencilSpec,
    pub tiling: TileShape,
    pub reorder: Option<Reorder>,
    pub bug: Option<BugSite>,
    order: Vec<Loop>,
    canon: Vec<Loop>,
    terms: Vec<Vec<(usize, Vec<i32>, f64)>>,
    access_base: Vec<usize>,
}

impl TiledVariant {
    pub fn new(spec: &StencilSpec, tiling: TileShape, reorder: Option<Reorder>, bug: Option<BugSite>) -> Result<Self> {
        let d = spec.dims;
        if tiling.time == 0 || tiling.space.len() != d || tiling.space.contains(&0) {
            return Err(Error::IllegalTiling(format!("{tiling:?} for a {d}-d domain")));
        }
        let canon = canonical_loops(d);
        let order = match &reorder {
            None => canon.clone(),
            Some(r) => {
                let mut sorted = r.order.clone();
                sorted.sort_by_key(|l| canon.iter().position(|c| c == l));
                let nested = (0..d).all(|j| {
                    let pos = |l| r.order.iter().position(|&x| x == l);
                    pos(Loop::Tile(j)) < pos(Loop::Point(j))
                });
                if sorted != canon || !nested {
                    return Err(Error::IllegalTiling(format!("loop order {}", r.name)));
                }
                r.order.clone()
            }
        };
        let terms: Vec<Vec<_>> =
            (0..spec.arrays).map(|x| spec.terms(x).into_iter().map(|t| (t.from, t.offset, t.coeff)).collect()).collect();
        let mut access_base = Vec::with_capacity(spec.arrays);
        let mut next = 0;
        for t in &terms {
            access_base.push(next);
            next += (t.len() + 1) * d;
        }
        Ok(Self { spec: spec.clone(), tiling, reorder, bug, order, canon, terms, access_base })
    }

    pub fn bound_sites(&self) -> usize {
        2 * self.canon.len()
    }

    pub fn access_sites(&self) -> usize {
        self.terms.iter().map(|t| (t.len() + 1) * self.spec.dims).sum()
    }

    fn selected(&self, kind: BugKind) -> Option<usize> {
        self.bug.as_ref().filter(|b| b.kind == kind).map(|b| b.site_id)
    }

    /// States at `1..=levels` steps after `state`. Levels start as copies of `state`, so a
    /// point a mutated nest never writes keeps a stale value.
    pub fn advance(&self, state: &GridState, levels: usize, reached: &mut bool) -> Vec<GridState> {
        let mut lv: Vec<GridState> = (0..=levels)
            .map(|k| {
                let mut g = state.clone();
                g.time = state.time + k as u64;
                g
            })
            .collect();
        let ctx = Ctx {
            levels: levels as i64,
            tiles: (0..self.spec.dims).map(|j| (self.spec.upper[j] - self.spec.lower[j]) / self.tiling.space[j] as i64 + 1).collect(),
            strides: state.strides(),
            width: self.spec.width(),
            bound: self.selected(BugKind::LoopBound),
            access: self.selected(BugKind::ArrayAccess),
        };
        let mut vars = Vars { t: 0, tile: vec![0; self.spec.dims], point: self.spec.lower.clone() };
        self.nest(0, &mut vars, &mut lv, reached, &ctx);
        lv.remove(0);
        lv
    }

    fn nest(&self, depth: usize, vars: &mut Vars, lv: &mut [GridState], reached: &mut bool, ctx: &Ctx) {
        let Some(&l) = self.order.get(depth) else {
            self.body(vars, lv, reached, ctx);
            return;
        };
        let k = self.canon.iter().position(|&c| c == l).unwrap_or(0);
        let (lb, ub) = match l {
            Loop::Time => (1, ctx.levels),
            Loop::Tile(j) => (0, ctx.tiles[j] - 1),
            Loop::Point(j) => {
                let s = self.spec.lower[j] + vars.tile[j] * self.tiling.space[j] as i64;
                (s, (s + self.tiling.space[j] as i64 - 1).min(self.spec.upper[j]))
            }
        };
        if ctx.bound.is_some_and(|s| s / 2 == k) {
            *reached = true;
        }
        let lb = bound_hook(2 * k, lb, ctx.bound);
        let ub = bound_hook(2 * k + 1, ub, ctx.bound);
        let backwards = self.reorder.as_ref().is_some_and(|r| r.reversed.contains(&l));
        let mut visit = |x: i64, vars: &mut Vars| {
            match l {
                Loop::Time => vars.t = x,
                Loop::Tile(j) => vars.tile[j] = x,
                Loop::Point(j) => vars.point[j] = x,
            }
            self.nest(depth + 1, vars, lv, reached, ctx);
        };
        if backwards {
            for x in (lb..=ub).rev() {
                visit(x, vars);
            }
        } else {
            for x in lb..=ub {
                visit(x, vars);
            }
        }
    }

    fn body(&self, vars: &Vars, lv: &mut [GridState], reached: &mut bool, ctx: &Ctx) {
        let t = vars.t;
        let p = &vars.point;
        let in_domain = p.iter().zip(&self.spec.lower).zip(&self.spec.upper).all(|((&x, &l), &u)| x >= l && x <= u);
        if t < 1 || t > ctx.levels || !in_domain {
            return;
        }
        let (before, after) = lv.split_at_mut(t as usize);
        let prev = &before[t as usize - 1];
        let cur = &mut after[0];
        let interior = is_interior(&self.spec, &ctx.width, p);
        let d = self.spec.dims;
        let arrays: Vec<usize> = if self.reorder.as_ref().is_some_and(|r| r.statements_reversed) {
            (0..self.spec.arrays).rev().collect()
        } else {
            (0..self.spec.arrays).collect()
        };
        for x in arrays {
            if !interior {
                let i = prev.index(p);
                cur.data[x][i] = boundary_update(&self.spec, prev, x, p, cur.time);
                continue;
            }
            let base = self.access_base[x];
            let site_of = |k: usize, j: usize| base + k * d + j;
            if ctx.access.is_some_and(|s| s >= base && s < base + (self.terms[x].len() + 1) * d) {
                *reached = true;
            }
            let read = |k: usize, off: &[i32]| -> f64 {
                let mut idx = 0isize;
                for j in 0..d {
                    let s = p[j] - self.spec.lower[j] + off[j] as i64;
                    idx += access_hook(site_of(k, j), s, ctx.access) as isize * ctx.strides[j];
                }
                prev.data[self.terms[x][k].0][idx as usize]
            };
            let (_, o0, c0) = &self.terms[x][0];
            let mut acc = c0 * read(0, o0);
            for (k, (_, o, c)) in self.terms[x].iter().enumerate().skip(1) {
                acc += c * read(k, o);
            }
            let wk = self.terms[x].len();
            let mut widx = 0isize;
            for (j, (&pj, &lj)) in p.iter().zip(&self.spec.lower).enumerate() {
                widx += access_hook(site_of(wk, j), pj - lj, ctx.access) as isize * ctx.strides[j];
            }
            cur.data[x][widx as usize] = acc;
        }
    }
}

struct Ctx {
    levels: i64,
    tiles: Vec<i64>,
    strides: Vec<isize>,
    width: Vec<i32>,
    bound: Option<usize>,
    access: Option<usize>,
}

struct Vars {
    t: i64,
    tile: Vec<i64>,
    point: Vec<i64>,
}

/// Runs `steps` steps of a variant, one time tile at a time. Returns whether the selected
/// bug site executed.
pub fn run_tiled(variant: &TiledVariant, state: &mut GridState, steps: usize) -> bool {
    let mut reached = false;
    let mut left = steps;
    while left > 0 {
        let n = left.min(variant.tiling.time);
        if let Some(last) = variant.advance(state, n, &mut reached).pop() {
            *state = last;
        }
        left -= n;
    }
    reached
}

/// Adapts a variant to the one-step interface of a protected run: each time tile is
/// computed from the state at its start, then handed out one step at a time.
pub struct TiledRunner<'a> {
    variant: &'a TiledVariant,
    pending: VecDeque<GridState>,
    pub reached: bool,
}

impl<'a> TiledRunner<'a> {
    pub fn new(variant: &'a TiledVariant) -> Self {
        Self { variant, pending: VecDeque::new(), reached: false }
    }

    pub fn step(&mut self, state: &mut GridState) -> Result<()> {
        if self.pending.front().is_none_or(|g| g.time != state.time + 1) {
            self.pending = self.variant.advance(state, self.variant.tiling.time, &mut self.reached).into();
        }
        if let Some(next) = self.pending.pop_front() {
            *state = next;
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignMode {
    Bitflip,
    Bitflip2,
    Bound,
    Access,
    Reorder,
}

impl std::str::FromStr for CampaignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitflip" => Ok(Self::Bitflip),
            "bitflip2" => Ok(Self::Bitflip2),
            "bound" => Ok(Self::Bound),
            "access" => Ok(Self::Access),
            "reorder" => Ok(Self::Reorder),
            _ => Err(Error::MalformedInput(format!("unknown injection mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub benchmark: String,
    pub grid: usize,
    pub goal: Goal,
    pub trials: usize,
    pub mode: CampaignMode,
    pub seed: u64,
    /// Run length; `0` selects `4 T` of the chosen configuration.
    pub steps: usize,
    /// Restrict bit flips to protected bits of points at least `wT` inside the domain.
    pub constrained: bool,
    pub tiling: TileShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub mode: CampaignMode,
    pub site_or_bit: String,
    pub time_step: Option<u64>,
    pub reached: bool,
    pub manifested: bool,
    pub detected: bool,
    pub matched_bits_min: Option<u32>,
    /// Whether the fault lies inside the guarantee: protected bits of an interior point for
    /// flips, every site for bugs.
    pub protected: bool,
    /// Low-order bits in which the final output differs from the clean run, at worst.
    pub diff_bits: u32,
    pub benchmark: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub benchmark: String,
    pub mode: CampaignMode,
    pub seed: u64,
    pub goal: Goal,
    pub steps: usize,
    pub config: DetectorConfig,
    pub sites: Option<usize>,
    pub trials: usize,
    pub reached: usize,
    pub manifested: usize,
    pub detected: usize,
    pub protected_manifested: usize,
    pub protected_detected: usize,
    pub detection_rate_protected: Option<f64>,
    pub detection_rate_unprotected: Option<f64>,
    pub false_positives: usize,
}

impl CampaignReport {
    pub fn from_records(
        cfg: &CampaignConfig,
        config: &DetectorConfig,
        steps: usize,
        sites: Option<usize>,
        records: &[TrialRecord],
        clean_detections: usize,
    ) -> Self {
        let count = |f: &dyn Fn(&TrialRecord) -> bool| records.iter().filter(|r| f(r)).count();
        let rate = |prot: bool| {
            let m = count(&|r| r.manifested && r.protected == prot);
            (m > 0).then(|| count(&|r| r.manifested && r.detected && r.protected == prot) as f64 / m as f64)
        };
        Self {
            benchmark: cfg.benchmark.clone(),
            mode: cfg.mode,
            seed: cfg.seed,
            goal: cfg.goal,
            steps,
            config: config.clone(),
            sites,
            trials: records.len(),
            reached: count(&|r| r.reached),
            manifested: count(&|r| r.manifested),
            detected: count(&|r| r.detected),
            protected_manifested: count(&|r| r.manifested && r.protected),
            protected_detected: count(&|r| r.manifested && r.protected && r.detected),
            detection_rate_protected: rate(true),
            detection_rate_unprotected: rate(false),
            false_positives: count(&|r| r.detected && !r.manifested) + clean_detections,
        }
    }
}

fn random_plan(rng: &mut ChaCha8Rng, spec: &StencilSpec, cfg: &CampaignConfig, t: usize, steps: usize, seed: u64) -> (SoftFaultPlan, bool) {
    let state = GridState::zeros(spec);
    let arrays = spec.state_arrays();
    let array = arrays[rng.gen_range(0..arrays.len())];
    let time_step = rng.gen_range(0..steps.max(1)) as u64;
    let reach: Vec<i32> = spec.width().iter().map(|&w| w * t as i32).collect();
    let bits = protected_bits(cfg.goal.udp);
    let plan = |mode, index, bits| SoftFaultPlan { mode, time_step, array, index, bits, seed };
    match cfg.mode {
        CampaignMode::Bitflip2 => {
            let sections = state.len().div_ceil(2);
            let index = rng.gen_range(0..sections);
            let span = if 2 * index + 1 < state.len() { 128 } else { 64 };
            let a = rng.gen_range(0..span);
            let mut b = rng.gen_range(0..span - 1);
            if b >= a {
                b += 1;
            }
            let p = plan(FaultMode::DoubleBitIn16ByteSection, index, vec![a, b]);
            let prot = p.bits.iter().all(|&x| bits.contains(&(x % 64)))
                && p.bits.iter().all(|&x| is_interior(spec, &reach, &state.coords(2 * index + (x / 64) as usize)));
            (p, prot)
        }
        _ => {
            let (index, bit) = if cfg.constrained {
                let lo: Vec<i64> = spec.lower.iter().zip(&reach).map(|(&l, &r)| l + r as i64).collect();
                let hi: Vec<i64> = spec.upper.iter().zip(&reach).map(|(&u, &r)| u - r as i64).collect();
                let p: Vec<i64> = lo.iter().zip(&hi).map(|(&a, &b)| rng.gen_range(a..=b.max(a))).collect();
                (state.index(&p), rng.gen_range(bits.clone()))
            } else {
                (rng.gen_range(0..state.len()), rng.gen_range(0..64))
            };
            let prot = bits.contains(&bit) && is_interior(spec, &reach, &state.coords(index));
            (plan(FaultMode::SingleBit, index, vec![bit]), prot)
        }
    }
}

fn diff_bits(a: &GridState, b: &GridState) -> (bool, u32) {
    let mut differs = false;
    let mut worst = 0;
    for (x, y) in a.data.iter().flatten().zip(b.data.iter().flatten()) {
        if x.to_bits() != y.to_bits() {
            differs = true;
            worst = worst.max(53 - matched_bits(*x, *y, 53));
        }
    }
    (differs, worst)
}

fn classify(report: &RunReport, clean: &GridState) -> (bool, bool, Option<u32>, u32) {
    let (manifested, diff) = diff_bits(&report.state, clean);
    let min = report.outcomes.iter().map(|o| o.matched_bits).min();
    (manifested, report.detected() > 0, min, diff)
}

/// Runs every trial of a campaign against one clean reference run.
pub fn run_campaign(cfg: &CampaignConfig, lut: &ConfigLUT) -> Result<(CampaignReport, Vec<TrialRecord>)> {
    if cfg.trials == 0 {
        return Err(Error::MalformedInput("a campaign needs at least one trial".into()));
    }
    let bench = build_benchmark(&cfg.benchmark, cfg.grid)?;
    let init = bench.initial_state();
    let (dc, width) = select_config(&bench.spec, lut, &init, cfg.goal)?;
    let steps = if cfg.steps == 0 { 4 * dc.t } else { cfg.steps };
    let prot = Protector::new(&bench.spec, dc, width, steps, &lut.meta.model)?;
    let clean = prot.run(init.clone(), Hooks::default(), &RunOptions::default())?;
    let variant = |bug: Option<BugSite>, reorder: Option<Reorder>| TiledVariant::new(&bench.spec, cfg.tiling.clone(), reorder, bug);
    let base = variant(None, None)?;
    let reorders = reorder_variants(bench.spec.dims);
    let sites = match cfg.mode {
        CampaignMode::Bound => Some(base.bound_sites()),
        CampaignMode::Access => Some(base.access_sites()),
        CampaignMode::Reorder => Some(reorders.len()),
        _ => None,
    };
    let opts = RunOptions::default();
    let trial = |i: usize| -> Result<TrialRecord> {
        let record = |site: String, time_step, reached, protected, report: &RunReport| {
            let (manifested, detected, matched_bits_min, diff_bits) = classify(report, &clean.state);
            TrialRecord {
                trial: i,
                mode: cfg.mode,
                site_or_bit: site,
                time_step,
                reached,
                manifested,
                detected,
                matched_bits_min,
                protected,
                diff_bits,
                benchmark: cfg.benchmark.clone(),
            }
        };
        match cfg.mode {
            CampaignMode::Bitflip | CampaignMode::Bitflip2 => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                let (plan, protected) = random_plan(&mut rng, &bench.spec, cfg, dc.t, steps, cfg.seed);
                let mut failure = None;
                let mut hit = false;
                let mut perturb = |t: u64, s: &mut GridState| {
                    if t == plan.time_step {
                        hit = true;
                        if let Err(e) = inject_soft_fault(s, &plan) {
                            failure = Some(e);
                        }
                    }
                };
                let hooks = Hooks { perturb: Some(&mut perturb), ..Default::default() };
                let report = prot.run(init.clone(), hooks, &opts)?;
                if let Some(e) = failure {
                    return Err(e);
                }
                let site =
                    format!("a{}:i{}:b{}", plan.array, plan.index, plan.bits.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("+"));
                Ok(record(site, Some(plan.time_step), hit, protected, &report))
            }
            CampaignMode::Bound | CampaignMode::Access | CampaignMode::Reorder => {
                let n = sites.unwrap_or(1);
                let id = i % n;
                let (v, name) = match cfg.mode {
                    CampaignMode::Reorder => (variant(None, Some(reorders[id].clone()))?, reorders[id].name.clone()),
                    CampaignMode::Bound => {
                        (variant(Some(BugSite { kind: BugKind::LoopBound, site_id: id, variant: None }), None)?, id.to_string())
                    }
                    _ => (variant(Some(BugSite { kind: BugKind::ArrayAccess, site_id: id, variant: None }), None)?, id.to_string()),
                };
                let mut runner = TiledRunner::new(&v);
                let mut step = |s: &mut GridState, _: &StencilSpec| runner.step(s);
                let hooks = Hooks { step: Some(&mut step), ..Default::default() };
                let report = prot.run(init.clone(), hooks, &opts)?;
                let reached = cfg.mode == CampaignMode::Reorder || runner.reached;
                Ok(record(name, None, reached, true, &report))
            }
        }
    };
    let records: Vec<TrialRecord> = (0..cfg.trials).into_par_iter().map(trial).collect::<Result<_>>()?;
    let report = CampaignReport::from_records(cfg, dc, steps, sites, &records, clean.detected());
    Ok((report, records))
}

pub fn write_trials_csv<W: Write>(out: W, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let records: Vec<TrialRecord> =
        r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::MalformedInput(e.to_string()))?;
    if records.is_empty() {
        return Err(Error::MalformedInput("no campaign records".into()));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::RowStream;
    use crate::error_model::canonical_width;
    use crate::float::FloatModel;
    use crate::runtime::run_protected;
    use crate::stencil::{run_iterated, scan_arrays};
    use crate::synthesis::{offline_profile, RowFeed};
    use proptest::prelude::*;

    fn lut_for(id: &str, n: usize, tmax: usize, udp: u32, cov: u32) -> ConfigLUT {
        let b = build_benchmark(id, n).unwrap();
        let w = canonical_width(scan_arrays(&b.initial_state(), 0..b.spec.arrays).ok());
        let rows = RowFeed::Stream(Box::new(RowStream::new(&b.spec)));
        offline_profile(&b.spec, rows, tmax, &[w], &[udp], &[cov], &FloatModel::binary64()).unwrap()
    }

    fn campaign(id: &str, mode: CampaignMode, trials: usize) -> CampaignConfig {
        CampaignConfig {
            benchmark: id.into(),
            grid: 64,
            goal: Goal { udp: 15, cov: 0.8 },
            trials,
            mode,
            seed: 7,
            steps: 0,
            constrained: false,
            tiling: TileShape::uniform(2, 4, 16),
        }
    }

    #[test]
    fn flip_examples() {
        assert_eq!(flip_bit(1.0, 63), -1.0);
        assert_eq!(flip_bit(1.0, 0), 1.0 + f64::EPSILON);
        assert_eq!(flip_bit(1.0, 52), 0.5);
    }

    #[test]
    fn protected_bit_ranges() {
        assert_eq!(protected_bits(15), 38..64);
        assert_eq!(protected_bits(1), 52..64);
        assert_eq!(protected_bits(0), 52..64);
        assert_eq!(protected_bits(60), 0..64);
    }

    proptest! {
        #[test]
        fn flips_are_involutions(v in any::<f64>(), bit in 0u32..64) {
            prop_assert_eq!(flip_bit(flip_bit(v, bit), bit).to_bits(), v.to_bits());
        }

        #[test]
        fn injecting_twice_restores_the_grid(index in 0usize..64, a in 0u32..128, b in 0u32..128, single in any::<bool>()) {
            prop_assume!(a != b);
            let bench = build_benchmark("h1", 16).unwrap();
            let orig = bench.initial_state();
            let plan = if single {
                SoftFaultPlan { mode: FaultMode::SingleBit, time_step: 0, array: 0, index, bits: vec![a % 64], seed: 0 }
            } else {
                SoftFaultPlan { mode: FaultMode::DoubleBitIn16ByteSection, time_step: 0, array: 0, index, bits: vec![a, b], seed: 0 }
            };
            let mut s = orig.clone();
            inject_soft_fault(&mut s, &plan).unwrap();
            prop_assert_ne!(&s, &orig);
            inject_soft_fault(&mut s, &plan).unwrap();
            prop_assert_eq!(&s, &orig);
        }
    }

    #[test]
    fn soft_fault_placement() {
        let bench = build_benchmark("h1", 16).unwrap();
        let orig = bench.initial_state();
        let mut s = orig.clone();
        let corner = s.index(&[0, 0]);
        inject_soft_fault(
            &mut s,
            &SoftFaultPlan { mode: FaultMode::SingleBit, time_step: 0, array: 0, index: corner, bits: vec![63], seed: 0 },
        )
        .unwrap();
        assert_eq!(s.data[0][corner], -orig.data[0][corner]);

        let mut s = orig.clone();
        let plan =
            SoftFaultPlan { mode: FaultMode::DoubleBitIn16ByteSection, time_step: 0, array: 0, index: 5, bits: vec![65, 127], seed: 0 };
        inject_soft_fault(&mut s, &plan).unwrap();
        let changed: Vec<usize> = (0..s.len()).filter(|&i| s.data[0][i] != orig.data[0][i]).collect();
        assert_eq!(changed, vec![11]);
        assert_eq!(s.data[0][11].to_bits() ^ orig.data[0][11].to_bits(), (1 << 1) | (1 << 63));

        let far = SoftFaultPlan { mode: FaultMode::SingleBit, time_step: 0, array: 0, index: s.len(), bits: vec![3], seed: 0 };
        assert!(matches!(inject_soft_fault(&mut s, &far), Err(Error::LocationOutOfRange(_))));
        let late = SoftFaultPlan { time_step: 3, index: 0, ..far };
        assert!(matches!(inject_soft_fault(&mut s, &late), Err(Error::TimeMismatch { .. })));
    }

    #[test]
    fn hook_examples() {
        assert_eq!(bound_hook(0, -938, None), -938);
        assert_eq!(bound_hook(0, -938, Some(1)), -938);
        assert_eq!(bound_hook(2, 17, Some(2)), 18);
        assert_eq!(bound_hook(3, 17, Some(3)), 16);
        assert_eq!(access_hook(51, 10, Some(50)), 10);
        assert_eq!(access_hook(51, 10, Some(51)), 5);
        assert_eq!(access_hook(4, 0, Some(4)), 0);
    }

    #[test]
    fn clean_tiled_runs_match_the_reference() {
        for id in ["h1", "w1", "p1"] {
            let bench = build_benchmark(id, 64).unwrap();
            let mut reference = bench.initial_state();
            run_iterated(&mut reference, &bench.spec, 128).unwrap();
            for (tt, ts) in [(1, 64), (4, 16), (7, 10), (128, 3)] {
                let v = TiledVariant::new(&bench.spec, TileShape::uniform(2, tt, ts), None, None).unwrap();
                let mut s = bench.initial_state();
                run_tiled(&v, &mut s, 128);
                assert_eq!((s.time, &s.data), (reference.time, &reference.data), "{id} tiling ({tt}, {ts})");
            }
        }
        let bench = build_benchmark("h1-1d", 64).unwrap();
        let mut reference = bench.initial_state();
        run_iterated(&mut reference, &bench.spec, 50).unwrap();
        let v = TiledVariant::new(&bench.spec, TileShape::uniform(1, 6, 9), None, None).unwrap();
        let mut s = bench.initial_state();
        run_tiled(&v, &mut s, 50);
        assert_eq!(s.data, reference.data);
    }

    #[test]
    fn illegal_tilings_are_rejected() {
        let spec = build_benchmark("h1", 16).unwrap().spec;
        assert!(matches!(TiledVariant::new(&spec, TileShape::uniform(2, 0, 4), None, None), Err(Error::IllegalTiling(_))));
        assert!(matches!(TiledVariant::new(&spec, TileShape::uniform(1, 2, 4), None, None), Err(Error::IllegalTiling(_))));
        let inverted = Reorder::new(vec![Loop::Time, Loop::Point(0), Loop::Tile(0), Loop::Tile(1), Loop::Point(1)], vec![], false);
        assert!(matches!(TiledVariant::new(&spec, TileShape::uniform(2, 2, 4), Some(inverted), None), Err(Error::IllegalTiling(_))));
    }

    #[test]
    fn fifteen_distinct_reorders_per_family() {
        for d in [1, 2] {
            let v = reorder_variants(d);
            assert_eq!(v.len(), 15);
            let names: std::collections::BTreeSet<_> = v.iter().map(|r| r.name.clone()).collect();
            assert_eq!(names.len(), 15);
            let spec = build_benchmark(if d == 1 { "h1-1d" } else { "h1" }, 16).unwrap().spec;
            for r in v {
                TiledVariant::new(&spec, TileShape::uniform(d, 2, 4), Some(r), None).unwrap();
            }
        }
    }

    #[test]
    fn legal_and_illegal_reorders() {
        let bench = build_benchmark("h1", 64).unwrap();
        let mut reference = bench.initial_state();
        run_iterated(&mut reference, &bench.spec, 32).unwrap();
        let run = |r: Reorder| {
            let v = TiledVariant::new(&bench.spec, TileShape::uniform(2, 4, 16), Some(r), None).unwrap();
            let mut s = bench.initial_state();
            run_tiled(&v, &mut s, 32);
            s.data
        };
        let spatial_swap = Reorder::new(vec![Loop::Time, Loop::Tile(0), Loop::Tile(1), Loop::Point(1), Loop::Point(0)], vec![], false);
        assert_eq!(run(spatial_swap), reference.data);
        let time_inside = Reorder::new(vec![Loop::Tile(0), Loop::Time, Loop::Tile(1), Loop::Point(0), Loop::Point(1)], vec![], false);
        assert_ne!(run(time_inside), reference.data);
    }

    #[test]
    fn time_space_swap_is_flagged_by_the_detectors() {
        let bench = build_benchmark("h1", 64).unwrap();
        let lut = lut_for("h1", 64, 8, 15, 80);
        let swap = Reorder::new(vec![Loop::Tile(0), Loop::Time, Loop::Tile(1), Loop::Point(0), Loop::Point(1)], vec![], false);
        let v = TiledVariant::new(&bench.spec, TileShape::uniform(2, 4, 16), Some(swap), None).unwrap();
        let mut runner = TiledRunner::new(&v);
        let mut step = |s: &mut GridState, _: &StencilSpec| runner.step(s);
        let hooks = Hooks { step: Some(&mut step), ..Default::default() };
        let r = run_protected(&bench, &lut, Goal { udp: 15, cov: 0.8 }, 32, hooks).unwrap();
        assert!(r.detected() > 0);
    }

    #[test]
    fn bug_sites_are_dense_and_counted() {
        let spec = build_benchmark("h1", 16).unwrap().spec;
        let v = TiledVariant::new(&spec, TileShape::uniform(2, 2, 4), None, None).unwrap();
        assert_eq!(v.bound_sites(), 10);
        assert_eq!(v.access_sites(), (0..spec.arrays).map(|x| (spec.terms(x).len() + 1) * 2).sum::<usize>());
        for site in 0..v.bound_sites() {
            let b =
                TiledVariant::new(&spec, v.tiling.clone(), None, Some(BugSite { kind: BugKind::LoopBound, site_id: site, variant: None }))
                    .unwrap();
            let mut s = build_benchmark("h1", 16).unwrap().initial_state();
            assert!(run_tiled(&b, &mut s, 4), "bound site {site} never ran");
        }
    }

    #[test]
    fn campaigns_are_reproducible_and_free_of_false_positives() {
        let lut = lut_for("h1", 64, 8, 15, 80);
        for mode in [CampaignMode::Bitflip, CampaignMode::Bitflip2, CampaignMode::Bound, CampaignMode::Access, CampaignMode::Reorder] {
            let cfg = campaign("h1", mode, 24);
            let (a, ra) = run_campaign(&cfg, &lut).unwrap();
            let (b, rb) = run_campaign(&cfg, &lut).unwrap();
            assert_eq!(a, b);
            assert_eq!(ra, rb);
            assert_eq!(a.false_positives, 0, "{mode:?}");
            assert!(a.detected <= a.manifested && a.manifested <= a.reached && a.reached <= a.trials, "{a:?}");
            if let Some(sites) = a.sites {
                assert!(
                    ra.iter().filter(|r| r.reached).map(|r| r.site_or_bit.clone()).collect::<std::collections::BTreeSet<_>>().len()
                        <= sites
                );
            }
        }
    }

    #[test]
    fn constrained_flips_stay_in_protected_bits() {
        let lut = lut_for("h1", 64, 8, 15, 80);
        let mut cfg = campaign("h1", CampaignMode::Bitflip, 40);
        cfg.constrained = true;
        let (report, records) = run_campaign(&cfg, &lut).unwrap();
        assert!(records.iter().all(|r| r.protected));
        assert_eq!(report.detection_rate_unprotected, None);
        assert!(report.protected_manifested > 0);
    }

    #[test]
    fn trial_csv_roundtrip_and_errors() {
        let lut = lut_for("h1", 64, 8, 15, 80);
        let (_, records) = run_campaign(&campaign("h1", CampaignMode::Bound, 10), &lut).unwrap();
        let mut buf = Vec::new();
        write_trials_csv(&mut buf, &records).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with("trial,mode,site_or_bit,time_step,reached,manifested,detected,matched_bits_min"));
        assert_eq!(read_trials_csv(&buf[..]).unwrap(), records);
        assert!(matches!(read_trials_csv(&b""[..]), Err(Error::MalformedInput(_))));
        assert!(matches!(run_campaign(&campaign("h1", CampaignMode::Bound, 0), &lut), Err(Error::MalformedInput(_))));
    }
}
