//! Protected execution: detector banks evaluated at certified baselines, checked `T` steps
//! later, and closed out by double-direct trailing checks.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkDef;
use crate::coeffs::{CoeffRow, RowStream};
use crate::error::{Error, Result};
use crate::error_model::{canonical_width, direct_abs_bound, up_add};
use crate::float::{exponent, pow2, FloatModel};
use crate::stencil::{scan_arrays, step_iterated, GridState, StencilSpec};
use crate::synthesis::{adjust_coverage, interior_fraction, ConfigLUT, DetectorConfig, EssentialWidth};

/// Compensated dot product: products rounded once each, their sum accumulated with Kahan's
/// correction term.
pub fn kahan_dot(coeffs: &[f64], values: &[f64]) -> f64 {
    assert_eq!(coeffs.len(), values.len(), "kahan_dot needs equal lengths");
    kahan_sum(coeffs.iter().zip(values).map(|(&c, &v)| c * v))
}

fn kahan_sum(products: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in products {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Detected,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    /// Direct prediction against the iterated value at the target time.
    Single,
    /// Direct prediction against a second direct estimate from a later state.
    Trailing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorInstance {
    pub id: u64,
    pub array: usize,
    pub position: Vec<i64>,
    pub eval_t: u64,
    pub target_t: u64,
    pub predicted: f64,
    /// `2^{E_T + s - dp + 1}` for the bank's scale `s`.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub detector_id: u64,
    pub array: usize,
    pub position: Vec<i64>,
    pub eval_t: u64,
    pub target_t: u64,
    pub predicted: f64,
    pub actual: f64,
    pub matched_bits: u32,
    pub threshold: f64,
    pub verdict: Verdict,
    pub kind: CheckKind,
}

/// Leading bits on which two values agree, from the exponent gap between the larger
/// magnitude and the difference.
pub fn matched_bits(a: f64, b: f64, p: u32) -> u32 {
    if a == b {
        return p;
    }
    let d = (a - b).abs();
    if !d.is_finite() {
        return 0;
    }
    match (exponent(a.abs().max(b.abs())), exponent(d)) {
        (Some(m), Some(e)) => (m - e).clamp(0, p as i32) as u32,
        _ => 0,
    }
}

fn verdict(d: f64, threshold: f64) -> Verdict {
    if d.abs() < threshold {
        Verdict::Pass
    } else {
        Verdict::Detected
    }
}

/// Coefficients of one direct evaluation with their reads as `(array, linear offset)`.
#[derive(Clone, Debug)]
pub struct DirectTerms {
    pub coeffs: Vec<f64>,
    pub reads: Vec<(usize, isize)>,
}

impl DirectTerms {
    /// Nonzero entries of `row` for target `u`, restricted to `ew` when given.
    pub fn new(row: &CoeffRow, u: usize, ew: Option<&EssentialWidth>, strides: &[isize]) -> Self {
        let mut coeffs = Vec::new();
        let mut reads = Vec::new();
        for v in 0..row.arrays {
            for (o, c) in row.nonzero(u, v) {
                if ew.is_some_and(|e| !e.contains(&o)) {
                    continue;
                }
                coeffs.push(c.to_f64());
                reads.push((v, o.iter().zip(strides).map(|(&x, &s)| x as isize * s).sum()));
            }
        }
        Self { coeffs, reads }
    }

    pub fn eval(&self, data: &[Vec<f64>], idx: usize) -> f64 {
        kahan_sum(self.coeffs.iter().zip(&self.reads).map(|(&c, &(a, d))| c * data[a][(idx as isize + d) as usize]))
    }
}

/// Threshold for a detector sum of exponent `e_top` at scale `s`.
pub fn threshold(e_top: i32, scale: i32, dp: u32) -> f64 {
    pow2(e_top + scale - dp as i32 + 1).max(f64::from_bits(1))
}

/// Scale `s` that maps the data of `arrays` into `[.., 2^W]` canonical units: the largest
/// magnitude present has exponent `s + W - 1`.
pub fn data_scale(state: &GridState, arrays: impl IntoIterator<Item = usize>, width: u32) -> i32 {
    match scan_arrays(state, arrays) {
        Ok(r) => r.e_max + 1 - width as i32,
        Err(_) => 1 - width as i32,
    }
}

/// Direct prediction of `A_u[pos]` at `now + T` from the current state.
#[allow(clippy::too_many_arguments)]
pub fn eval_detector(
    state: &GridState,
    spec: &StencilSpec,
    terms: &DirectTerms,
    cfg: &DetectorConfig,
    target: usize,
    pos: &[i64],
    scale: i32,
    id: u64,
) -> Result<DetectorInstance> {
    let w = spec.width();
    let t = cfg.t as i64;
    let near =
        pos.iter().zip(&spec.lower).zip(&spec.upper).zip(&w).any(|(((&x, &l), &u), &wj)| x - l < wj as i64 * t || u - x < wj as i64 * t);
    if near {
        return Err(Error::PositionTooCloseToBoundary(pos.to_vec()));
    }
    let ti = cfg
        .targets
        .iter()
        .position(|&x| x == target)
        .ok_or_else(|| Error::InvalidSpec(format!("array {target} carries no detector in this configuration")))?;
    Ok(DetectorInstance {
        id,
        array: target,
        position: pos.to_vec(),
        eval_t: state.time,
        target_t: state.time + cfg.t as u64,
        predicted: terms.eval(&state.data, state.index(pos)),
        threshold: threshold(cfg.e_top[ti], scale, cfg.dp),
    })
}

/// Compares a prediction with the iterated value at its target time.
pub fn detector_check(state: &GridState, det: &DetectorInstance, p: u32) -> Result<CheckOutcome> {
    if state.time != det.target_t {
        return Err(Error::TimeMismatch { now: state.time, target: det.target_t });
    }
    let actual = state.get(det.array, &det.position);
    Ok(outcome(det, actual, det.threshold, CheckKind::Single, p))
}

fn outcome(det: &DetectorInstance, actual: f64, threshold: f64, kind: CheckKind, p: u32) -> CheckOutcome {
    CheckOutcome {
        detector_id: det.id,
        array: det.array,
        position: det.position.clone(),
        eval_t: det.eval_t,
        target_t: det.target_t,
        predicted: det.predicted,
        actual,
        matched_bits: matched_bits(det.predicted, actual, p),
        threshold,
        verdict: verdict(det.predicted - actual, threshold),
        kind,
    }
}

/// Second direct evaluation of a trailing check: the full `k`-step row of one array and its
/// rounding bound for canonical data.
#[derive(Clone, Debug)]
pub struct TrailingTerms {
    pub depth: usize,
    pub terms: DirectTerms,
    pub abs_bound: f64,
}

impl TrailingTerms {
    pub fn new(row: &CoeffRow, depth: usize, array: usize, strides: &[isize], width: u32, model: &FloatModel) -> Self {
        let full = EssentialWidth::full(&row.radius);
        Self { depth, terms: DirectTerms::new(row, array, None, strides), abs_bound: direct_abs_bound(row, array, width, &full, model) }
    }
}

/// Double-direct check of a pending detector: re-predicts its target value from the current
/// state with the `(T - t')`-step row and compares both estimates. The threshold widens by
/// the second evaluation's own rounding bound; the round-off of the `t'` iterated steps in
/// between is already part of the detector's budget.
pub fn trailing_check(
    state: &GridState,
    det: &DetectorInstance,
    rows: &BTreeMap<usize, CoeffRow>,
    width: u32,
    model: &FloatModel,
) -> Result<CheckOutcome> {
    let k = trailing_depth(state, det)?;
    let row = rows.get(&k).ok_or(Error::TstepRowMissing(k))?;
    let parts = TrailingTerms::new(row, k, det.array, &state.strides(), width, model);
    trailing_check_with(state, det, &parts, width, model)
}

fn trailing_depth(state: &GridState, det: &DetectorInstance) -> Result<usize> {
    let mismatch = Error::TimeMismatch { now: state.time, target: det.target_t };
    let span = det.target_t - det.eval_t;
    match state.time.checked_sub(det.eval_t) {
        Some(elapsed) if elapsed < span => Ok((span - elapsed) as usize),
        _ => Err(mismatch),
    }
}

/// Trailing check with the second evaluation prepared in advance.
pub fn trailing_check_with(
    state: &GridState,
    det: &DetectorInstance,
    parts: &TrailingTerms,
    width: u32,
    model: &FloatModel,
) -> Result<CheckOutcome> {
    let k = trailing_depth(state, det)?;
    if k != parts.depth {
        return Err(Error::TstepRowMissing(k));
    }
    let second = parts.terms.eval(&state.data, state.index(&det.position));
    let scale = data_scale(state, 0..state.data.len(), width);
    let thr = up_add(det.threshold, parts.abs_bound * pow2(scale));
    Ok(outcome(det, second, thr, CheckKind::Trailing, model.precision))
}

/// Baselines, regular checks and trailing checks of a run of `iters` steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters: usize,
    pub t: usize,
    pub rho: usize,
    pub t_delta: usize,
    pub baselines: Vec<usize>,
    /// `(bank, time)` for every single-direct check.
    pub checks: Vec<(usize, usize)>,
    /// Banks still pending at the end, closed by trailing checks at `iters`.
    pub trailing: Vec<usize>,
}

impl Schedule {
    /// Largest number of banks evaluated but not yet checked at any time.
    pub fn max_live(&self) -> usize {
        (0..=self.iters)
            .map(|t| {
                self.baselines.iter().filter(|&&b| b <= t && t < b + self.t && b + self.t <= self.iters).count()
                    + self.trailing.iter().filter(|&&i| self.baselines[i] <= t).count()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Banks at every multiple of `rho` below `iters`; each is checked `T` steps later when that
/// fits in the run, otherwise by a trailing check at the end.
pub fn plan_schedule(iters: usize, t: usize, rho: usize) -> Result<Schedule> {
    if rho == 0 || rho > t {
        return Err(Error::InfeasibleConfig(format!("rho {rho} outside 1..={t}")));
    }
    if 2 * rho <= t {
        return Err(Error::RhoTooSmall { rho, t });
    }
    let mut baselines = Vec::new();
    let mut b = 0;
    while b < iters.max(1) {
        baselines.push(b);
        b += rho;
    }
    let mut checks = Vec::new();
    let mut trailing = Vec::new();
    for (i, &b) in baselines.iter().enumerate() {
        if b + t <= iters {
            checks.push((i, b + t));
        } else {
            trailing.push(i);
        }
    }
    Ok(Schedule { iters, t, rho, t_delta: t - rho, baselines, checks, trailing })
}

/// Detector positions per dimension: first at `l + wT + ceil(pw/2)`, then every `pw` while at
/// least `wT` from the upper face. A closing detector sits on the last admissible point when
/// the regular lattice leaves more than `ceil(pw/2)` points uncovered before it.
pub fn detector_positions(spec: &StencilSpec, t: usize, pw: &[i32]) -> Vec<Vec<i64>> {
    let w = spec.width();
    (0..spec.dims)
        .map(|j| {
            let reach = w[j] as i64 * t as i64;
            let (a, b) = (spec.lower[j] + reach, spec.upper[j] - reach);
            let step = pw[j].max(1) as i64;
            let half = (step + 1) / 2;
            let mut v = Vec::new();
            if a > b {
                return v;
            }
            let mut x = (a + half).min(b);
            while x <= b {
                v.push(x);
                x += step;
            }
            if v.last().is_some_and(|&l| l + half < b) {
                v.push(b);
            }
            v
        })
        .collect()
}

fn cartesian(axes: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out.into_iter().flat_map(|p| a.iter().map(move |&x| [p.clone(), vec![x]].concat())).collect();
    }
    out
}

/// Rows of the given depths, produced by one streaming pass.
pub fn rows_at(spec: &StencilSpec, depths: &BTreeSet<usize>) -> BTreeMap<usize, CoeffRow> {
    let mut out = BTreeMap::new();
    let Some(&max) = depths.iter().max() else { return out };
    let mut s = RowStream::new(spec);
    if depths.contains(&0) {
        out.insert(0, s.current().clone());
    }
    for k in 1..=max {
        let r = s.advance();
        if depths.contains(&k) {
            out.insert(k, r.clone());
        }
    }
    out
}

pub type PerturbHook<'a> = dyn FnMut(u64, &mut GridState) + 'a;
pub type StepHook<'a> = dyn FnMut(&mut GridState, &StencilSpec) -> Result<()> + 'a;
pub type StopHook<'a> = dyn FnMut(u64, &GridState) -> bool + 'a;

/// Callbacks a run offers to fault injectors and drivers.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Called at time `t` after that time's checks and evaluations, before step `t + 1`.
    pub perturb: Option<&'a mut PerturbHook<'a>>,
    /// Replaces the reference step.
    pub step: Option<&'a mut StepHook<'a>>,
    /// Early stop: returning `true` at time `t` ends the run there with trailing checks.
    pub stop: Option<&'a mut StopHook<'a>>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Re-scan the exponent width at every baseline and fail if it outgrows the profile.
    pub revalidate_range: bool,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub state: GridState,
    pub outcomes: Vec<CheckOutcome>,
    pub config: DetectorConfig,
    pub width: u32,
    pub schedule: Schedule,
    pub detectors_per_bank: usize,
}

impl RunReport {
    pub fn detected(&self) -> usize {
        self.outcomes.iter().filter(|o| o.verdict == Verdict::Detected).count()
    }
}

/// Everything a protected run needs besides the state, prepared once per configuration.
pub struct Protector {
    pub spec: StencilSpec,
    pub config: DetectorConfig,
    pub width: u32,
    pub model: FloatModel,
    pub positions: Vec<Vec<i64>>,
    terms: Vec<DirectTerms>,
    rows: BTreeMap<usize, CoeffRow>,
    schedule: Schedule,
}

impl Protector {
    pub fn new(spec: &StencilSpec, config: &DetectorConfig, width: u32, steps: usize, model: &FloatModel) -> Result<Self> {
        let schedule = plan_schedule(steps, config.t, config.rho)?;
        let mut depths: BTreeSet<usize> = [config.t].into();
        for &i in &schedule.trailing {
            depths.insert(config.t - (steps - schedule.baselines[i]).min(config.t));
        }
        let rows = rows_at(spec, &depths);
        let strides = GridState::zeros(spec).strides();
        let ew = config.ew();
        let row = &rows[&config.t];
        let terms = config.targets.iter().map(|&u| DirectTerms::new(row, u, Some(&ew), &strides)).collect();
        let positions = cartesian(&detector_positions(spec, config.t, &config.pw));
        if positions.is_empty() {
            return Err(Error::InfeasibleConfig("grid too small for any detector".into()));
        }
        Ok(Self { spec: spec.clone(), config: config.clone(), width, model: *model, positions, terms, rows, schedule })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn eval_bank(&self, state: &GridState, bank: usize) -> Result<Vec<DetectorInstance>> {
        let scale = data_scale(state, 0..state.data.len(), self.width);
        let per = self.positions.len();
        let mut dets = Vec::with_capacity(per * self.config.targets.len());
        for (ti, &u) in self.config.targets.iter().enumerate() {
            let base = ((bank * self.config.targets.len() + ti) * per) as u64;
            let bank_dets: Result<Vec<_>> = self
                .positions
                .par_iter()
                .enumerate()
                .map(|(i, p)| eval_detector(state, &self.spec, &self.terms[ti], &self.config, u, p, scale, base + i as u64))
                .collect();
            dets.extend(bank_dets?);
        }
        Ok(dets)
    }

    /// Runs the schedule from `state`, which must be at time 0 of the protected segment.
    pub fn run(&self, mut state: GridState, mut hooks: Hooks<'_>, opts: &RunOptions) -> Result<RunReport> {
        let sch = &self.schedule;
        let p = self.model.precision;
        let mut live: BTreeMap<usize, Vec<DetectorInstance>> = BTreeMap::new();
        let mut outcomes = Vec::new();
        let checks: BTreeMap<usize, Vec<usize>> = sch.checks.iter().fold(BTreeMap::new(), |mut m, &(b, t)| {
            m.entry(t).or_insert_with(Vec::new).push(b);
            m
        });
        let baselines: BTreeMap<usize, usize> = sch.baselines.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let mut now = 0usize;
        loop {
            if let Some(banks) = checks.get(&now) {
                for b in banks {
                    if let Some(dets) = live.remove(b) {
                        for d in &dets {
                            outcomes.push(detector_check(&state, d, p)?);
                        }
                    }
                }
            }
            if now == sch.iters {
                break;
            }
            if let Some(&bank) = baselines.get(&now) {
                if opts.revalidate_range {
                    let w = canonical_width(scan_arrays(&state, 0..state.data.len()).ok());
                    if w > self.width {
                        return Err(Error::InfeasibleConfig(format!("input range widened to {w} binades, profiled for {}", self.width)));
                    }
                }
                live.insert(bank, self.eval_bank(&state, bank)?);
            }
            if let Some(f) = hooks.perturb.as_mut() {
                f(state.time, &mut state);
            }
            if let Some(stop) = hooks.stop.as_mut() {
                if stop(state.time, &state) {
                    break;
                }
            }
            match hooks.step.as_mut() {
                Some(f) => f(&mut state, &self.spec)?,
                None => step_iterated(&mut state, &self.spec)?,
            }
            now += 1;
        }
        // Close out every bank whose target lies beyond the end of the run.
        if !live.is_empty() {
            let missing: BTreeSet<usize> = live
                .values()
                .flat_map(|d| d.first())
                .map(|d| (d.target_t - state.time) as usize)
                .filter(|k| !self.rows.contains_key(k))
                .collect();
            let extra = rows_at(&self.spec, &missing);
            let strides = state.strides();
            let scale = data_scale(&state, 0..state.data.len(), self.width);
            for dets in live.values() {
                let Some(first) = dets.first() else { continue };
                let k = (first.target_t - state.time) as usize;
                let row = self.rows.get(&k).or_else(|| extra.get(&k)).ok_or(Error::TstepRowMissing(k))?;
                let parts: Vec<TrailingTerms> =
                    self.config.targets.iter().map(|&u| TrailingTerms::new(row, k, u, &strides, self.width, &self.model)).collect();
                let checked: Vec<CheckOutcome> = dets
                    .par_iter()
                    .map(|d| {
                        let ti = self.config.targets.iter().position(|&u| u == d.array).unwrap_or(0);
                        let p = &parts[ti];
                        let second = p.terms.eval(&state.data, state.index(&d.position));
                        let thr = up_add(d.threshold, p.abs_bound * pow2(scale));
                        outcome(d, second, thr, CheckKind::Trailing, self.model.precision)
                    })
                    .collect();
                outcomes.extend(checked);
            }
        }
        outcomes.sort_by_key(|o| (o.detector_id, o.kind == CheckKind::Trailing));
        Ok(RunReport {
            state,
            outcomes,
            config: self.config.clone(),
            width: self.width,
            schedule: sch.clone(),
            detectors_per_bank: self.positions.len() * self.config.targets.len(),
        })
    }
}

/// User goal: protected leading bits and coverage fraction.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub udp: u32,
    pub cov: f64,
}

/// Looks up the configuration for a state's scanned width and the goal.
pub fn select_config<'a>(spec: &StencilSpec, lut: &'a ConfigLUT, state: &GridState, goal: Goal) -> Result<(&'a DetectorConfig, u32)> {
    let hash: String = spec.structure_hash().iter().map(|b| format!("{b:02x}")).collect();
    if hash != lut.meta.spec_hash {
        return Err(Error::SpecHashMismatch);
    }
    if !(0.0..=1.0).contains(&goal.cov) {
        return Err(Error::UnsupportedCoverage);
    }
    adjust_coverage(goal.cov, interior_fraction(&spec.extent(), &spec.width(), 1))?;
    let width = canonical_width(scan_arrays(state, 0..state.data.len()).ok());
    Ok((lut.lookup(width, goal.udp, goal.cov)?, width))
}

/// Runs a benchmark under detector protection for `steps` steps.
pub fn run_protected(bench: &BenchmarkDef, lut: &ConfigLUT, goal: Goal, steps: usize, hooks: Hooks<'_>) -> Result<RunReport> {
    let state = bench.initial_state();
    let (cfg, width) = select_config(&bench.spec, lut, &state, goal)?;
    let prot = Protector::new(&bench.spec, cfg, width, steps, &lut.meta.model)?;
    prot.run(state, hooks, &RunOptions::default())
}

/// Writes outcomes as CSV with hexadecimal bit patterns for the compared values.
pub fn write_outcomes_csv<W: Write>(out: W, outcomes: &[CheckOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["detector_id", "array", "position", "eval_t", "target_t", "predicted_hex", "actual_hex", "matched_bits", "verdict"])
        .map_err(csv_err)?;
    for o in outcomes {
        let pos: Vec<String> = o.position.iter().map(|x| x.to_string()).collect();
        w.write_record([
            o.detector_id.to_string(),
            o.array.to_string(),
            pos.join(";"),
            o.eval_t.to_string(),
            o.target_t.to_string(),
            format!("{:#018x}", o.predicted.to_bits()),
            format!("{:#018x}", o.actual.to_bits()),
            o.matched_bits.to_string(),
            format!("{:?}", o.verdict),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
