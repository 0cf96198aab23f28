mod manifest;
mod report;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fpdetect::bench::{build_benchmark, BenchmarkDef, DEFAULT_STEPS};
use fpdetect::coeffs::{RowStream, TableWriter};
use fpdetect::error_model::{combine, direct_abs_bound, iterated_abs_bound, PathSums};
use fpdetect::float::FloatModel;
use fpdetect::injection::{
    inject_soft_fault, run_campaign, write_trials_csv, CampaignConfig, CampaignMode, FaultMode, SoftFaultPlan, TileShape,
};
use fpdetect::runtime::{run_protected, select_config, write_outcomes_csv, Goal, Hooks};
use fpdetect::stencil::{run_iterated, StencilSpec};
use fpdetect::synthesis::{offline_profile, ConfigLUT, EssentialWidth, RowFeed};

use crate::manifest::RunManifest;

const DEFAULT_SEED: u64 = 0x5eed_f00d;

/// Prints a line to standard output, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "fpdetect", version, about = "Synthesize and run stencil error detectors")]
struct Cli {
    /// Worker threads for the library's parallel sections.
    #[arg(long, global = true, env = "FPDETECT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unroll coefficients and profile detector configurations into a lookup table.
    Synth(SynthArgs),
    /// Run a benchmark under detection, optionally with one injected fault.
    Run(RunArgs),
    /// Run a fault or bug injection campaign.
    Inject(InjectArgs),
    /// Aggregate campaign CSVs into detection-rate tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark identifier (h1..h6, p1..p9, w1..w6, c1..c3, their `-1d` analogs, heat1d).
    #[arg(long)]
    bench: String,
    /// Points per dimension; defaults to 128 for 2-d and 4096 for 1-d benchmarks.
    #[arg(long)]
    grid: Option<usize>,
}

impl BenchArgs {
    fn build(&self) -> Result<BenchmarkDef> {
        let one_d = self.bench.ends_with("-1d") || self.bench == "heat1d";
        let n = self.grid.unwrap_or(if one_d { 4096 } else { 128 });
        Ok(build_benchmark(&self.bench, n)?)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Stencil spec as JSON.
    #[arg(long, conflicts_with = "bench", required_unless_present = "bench")]
    spec: Option<PathBuf>,
    #[arg(long)]
    bench: Option<String>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    tmax: u32,
    /// Binary coefficient table to write.
    #[arg(long)]
    out_table: Option<PathBuf>,
    /// Lookup table (JSON) to write.
    #[arg(long)]
    out_lut: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..=20))]
    exp_max: u32,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u32).range(1..=53))]
    udp_max: u32,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..=100))]
    cov_step: u32,
}

#[derive(Args)]
struct GoalArgs {
    /// Bits that must be protected, counted from the leading bit.
    #[arg(long)]
    udp: u32,
    /// Coverage goal, as a fraction (0.9) or a percentage (90).
    #[arg(long)]
    cov: f64,
}

impl GoalArgs {
    fn goal(&self) -> Goal {
        let cov = if self.cov > 1.0 { self.cov / 100.0 } else { self.cov };
        Goal { udp: self.udp, cov }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long)]
    lut: PathBuf,
    #[command(flatten)]
    goal: GoalArgs,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: u64,
    /// `bitflip:STEP:ARRAY:X,Y:BIT` or `bitflip2:STEP:ARRAY:SECTION:BIT,BIT`.
    #[arg(long)]
    inject: Option<String>,
    /// Outcome CSV.
    #[arg(long, default_value = "outcomes.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    bench: BenchArgs,
    /// Lookup table; profiled on the fly for the goal when absent.
    #[arg(long)]
    lut: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    goal: GoalArgs,
    /// Run length; 0 selects four detector intervals.
    #[arg(long, default_value_t = 0)]
    steps: usize,
    /// Restrict flips to protected bits of interior points.
    #[arg(long)]
    constrained: bool,
    #[arg(long, default_value_t = 4)]
    tile_time: usize,
    #[arg(long, default_value_t = 32)]
    tile_space: usize,
    /// Trial CSV; the summary JSON is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum Mode {
    Bitflip,
    Bitflip2,
    Bound,
    Access,
    Reorder,
}

impl From<Mode> for CampaignMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Bitflip => CampaignMode::Bitflip,
            Mode::Bitflip2 => CampaignMode::Bitflip2,
            Mode::Bound => CampaignMode::Bound,
            Mode::Access => CampaignMode::Access,
            Mode::Reorder => CampaignMode::Reorder,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign trial CSVs.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Inject(a) => cmd_inject(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Whether an error comes from writing into a closed pipe, as with `| head`.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    let pipe = |k: io::ErrorKind| k == io::ErrorKind::BrokenPipe;
    e.chain().any(|c| {
        c.downcast_ref::<io::Error>().is_some_and(|io| pipe(io.kind()))
            || c.downcast_ref::<serde_json::Error>().and_then(|j| j.io_error_kind()).is_some_and(pipe)
            || c.downcast_ref::<csv::Error>().is_some_and(|x| matches!(x.kind(), csv::ErrorKind::Io(io) if pipe(io.kind())))
    })
}

fn load_lut(path: &Path) -> Result<ConfigLUT> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ConfigLUT::from_json(&text)?)
}

/// Writes `value` as pretty JSON with the manifest under the `manifest` key.
fn write_json_with_manifest(path: &Path, value: serde_json::Value, manifest: &RunManifest) -> Result<()> {
    let mut value = value;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("manifest".into(), serde_json::to_value(manifest)?);
    }
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, &value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    let mut manifest = RunManifest::start("synth");
    let spec: StencilSpec = match (&a.spec, &a.bench) {
        (Some(p), _) => {
            manifest.spec_path = Some(p.display().to_string());
            StencilSpec::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        (None, Some(id)) => BenchArgs { bench: id.clone(), grid: a.grid }.build()?.spec,
        (None, None) => bail!("either --spec or --bench is required"),
    };
    spec.validate()?;
    let tmax = a.tmax as usize;
    let model = FloatModel::binary64();
    let exp_set: Vec<u32> = (1..=a.exp_max).collect();
    let udp_set: Vec<u32> = (1..=a.udp_max).collect();
    let cov_set: Vec<u32> = (0..=100).step_by(a.cov_step as usize).collect();
    let stream = Box::new(RowStream::new(&spec));
    let feed = match &a.out_table {
        Some(p) => {
            manifest.table_path = Some(p.display().to_string());
            RowFeed::Recorded(stream, TableWriter::create(p, &spec, tmax)?)
        }
        None => RowFeed::Stream(stream),
    };
    let lut = offline_profile(&spec, feed, tmax, &exp_set, &udp_set, &cov_set, &model)?;
    manifest.lut_path = Some(a.out_lut.display().to_string());
    manifest.finish();
    write_json_with_manifest(&a.out_lut, serde_json::from_str(&lut.to_json()?)?, &manifest)?;
    if let Some(p) = &a.out_table {
        manifest.write_sidecar(p)?;
    }

    let (maxdp, e_top) = max_precision(&spec, tmax, &model);
    say!("maxdp[{tmax}] = {maxdp} (width 1, E_T = {e_top})");
    let feasible = lut.entries.len() - lut.entries.values().filter(|c| matches!(c, fpdetect::synthesis::LutCell::Infeasible(_))).count();
    say!("{feasible} of {} cells feasible", lut.entries.len());
    for &c in &cov_set {
        let best = udp_set.iter().copied().filter(|&u| lut.cell(1, u, c).is_some()).max();
        let widths = exp_set.iter().filter(|&&w| udp_set.iter().any(|&u| lut.cell(w, u, c).is_some())).count();
        match best {
            Some(u) => say!("cov {c:>3}%: width 1 protects up to udp {u}; {widths}/{} widths feasible", exp_set.len()),
            None => say!("cov {c:>3}%: infeasible at width 1; {widths}/{} widths feasible", exp_set.len()),
        }
    }
    Ok(0)
}

/// Detector precision of the full-support direct evaluation at depth `tmax` for width-1 data.
fn max_precision(spec: &StencilSpec, tmax: usize, model: &FloatModel) -> (u32, i32) {
    let mut stream = RowStream::new(spec);
    let mut sums = PathSums::new(spec.arrays);
    sums.push_row(stream.current());
    for _ in 0..tmax {
        sums.push_row(stream.advance());
    }
    let row = stream.current();
    let mut best = (model.precision, 0);
    for u in spec.detector_targets() {
        let Some(e) = sums.top_exponent(tmax, u, 1) else { return (0, 0) };
        let te_s = iterated_abs_bound(spec, &sums, u, tmax, 1, model);
        let te_d = direct_abs_bound(row, u, 1, &EssentialWidth::full(&row.radius), model);
        let dp = combine(te_s, te_d, e, model).dp;
        if dp <= best.0 {
            best = (dp, e);
        }
    }
    best
}

fn parse_fault(text: &str, bench: &BenchmarkDef) -> Result<SoftFaultPlan> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| -> Result<u64> { s.trim().parse().with_context(|| format!("bad number {s:?} in --inject")) };
    let list = |s: &str| -> Result<Vec<u64>> { s.split(',').map(num).collect() };
    let [kind, step, array, place, bits] = parts[..] else {
        bail!("--inject expects KIND:STEP:ARRAY:LOCATION:BITS, got {text:?}");
    };
    let array = num(array)? as usize;
    if array >= bench.spec.arrays {
        bail!("array {array} does not exist");
    }
    let (mode, index) = match kind {
        "bitflip" => {
            let p: Vec<i64> = list(place)?.into_iter().map(|v| v as i64).collect();
            let extent = bench.spec.extent();
            if p.len() != bench.spec.dims || p.iter().zip(&extent).any(|(&x, &n)| x as usize >= n) {
                bail!("point {p:?} is outside the grid");
            }
            let idx = p.iter().zip(&extent).fold(0usize, |acc, (&x, &n)| acc * n + x as usize);
            (FaultMode::SingleBit, idx)
        }
        "bitflip2" => (FaultMode::DoubleBitIn16ByteSection, num(place)? as usize),
        _ => bail!("unknown fault kind {kind:?}"),
    };
    let bits: Vec<u32> = list(bits)?.into_iter().map(|b| b as u32).collect();
    Ok(SoftFaultPlan { mode, time_step: num(step)?, array, index, bits, seed: 0 })
}

fn cmd_run(a: &RunArgs) -> Result<u8> {
    let mut manifest = RunManifest::start("run");
    manifest.lut_path = Some(a.lut.display().to_string());
    let bench = a.bench.build()?;
    let lut = load_lut(&a.lut)?;
    let goal = a.goal.goal();
    manifest.goal = Some(goal);
    let plan = a.inject.as_deref().map(|s| parse_fault(s, &bench)).transpose()?;
    if let Some(p) = &plan {
        if p.time_step >= a.steps {
            bail!("injection step {} is not before the end of the run ({} steps)", p.time_step, a.steps);
        }
    }
    let mut fault_err = None;
    let mut perturb = |t: u64, g: &mut fpdetect::stencil::GridState| {
        if let Some(p) = plan.as_ref().filter(|p| p.time_step == t) {
            if let Err(e) = inject_soft_fault(g, p) {
                fault_err = Some(e);
            }
        }
    };
    let started = Instant::now();
    let report = run_protected(&bench, &lut, goal, a.steps as usize, Hooks { perturb: Some(&mut perturb), ..Hooks::default() })?;
    let protected = started.elapsed();
    if let Some(e) = fault_err {
        return Err(e.into());
    }

    let mut clean = bench.initial_state();
    let started = Instant::now();
    run_iterated(&mut clean, &bench.spec, a.steps)?;
    let plain = started.elapsed();

    let out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_outcomes_csv(out, &report.outcomes)?;
    let detected = report.detected();
    let cfg = &report.config;
    manifest.extra.insert("config".into(), serde_json::to_value(cfg)?);
    manifest.extra.insert("checks".into(), report.outcomes.len().into());
    manifest.extra.insert("detected".into(), detected.into());
    manifest.extra.insert("protected_seconds".into(), protected.as_secs_f64().into());
    manifest.extra.insert("unprotected_seconds".into(), plain.as_secs_f64().into());
    manifest.finish();
    manifest.write_sidecar(&a.out)?;

    say!(
        "config: T={} rho={} dp={} pw={:?} cost={:.4} coverage={:.3} width={}",
        cfg.t,
        cfg.rho,
        cfg.dp,
        cfg.pw,
        cfg.cost,
        cfg.coverage,
        report.width
    );
    say!("{} checks, {detected} detected", report.outcomes.len());
    let overhead = 100.0 * (protected.as_secs_f64() / plain.as_secs_f64().max(1e-9) - 1.0);
    say!(
        "overhead (informational): {:.1} ms protected vs {:.1} ms plain, {overhead:+.1}%",
        protected.as_secs_f64() * 1e3,
        plain.as_secs_f64() * 1e3
    );
    Ok(if detected > 0 { 2 } else { 0 })
}

fn cmd_inject(a: &InjectArgs) -> Result<u8> {
    let mut manifest = RunManifest::start("inject");
    let bench = a.bench.build()?;
    let goal = a.goal.goal();
    manifest.goal = Some(goal);
    manifest.seed = Some(a.seed);
    let lut = match &a.lut {
        Some(p) => {
            manifest.lut_path = Some(p.display().to_string());
            load_lut(p)?
        }
        None => {
            let cov = (goal.cov * 100.0).ceil() as u32;
            let feed = RowFeed::Stream(Box::new(RowStream::new(&bench.spec)));
            offline_profile(&bench.spec, feed, 64, &[1, 2, 4, 8, 12, 16, 20], &[goal.udp], &[cov], &FloatModel::binary64())?
        }
    };
    select_config(&bench.spec, &lut, &bench.initial_state(), goal)?;
    let cfg = CampaignConfig {
        benchmark: bench.id.clone(),
        grid: bench.spec.extent()[0],
        goal,
        trials: a.trials as usize,
        mode: a.mode.into(),
        seed: a.seed,
        steps: a.steps,
        constrained: a.constrained,
        tiling: TileShape::uniform(bench.spec.dims, a.tile_time, a.tile_space),
    };
    let (report, records) = run_campaign(&cfg, &lut)?;
    let out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_trials_csv(out, &records)?;
    manifest.finish();
    manifest.write_sidecar(&a.out)?;
    let summary = a.out.with_extension("summary.json");
    write_json_with_manifest(&summary, serde_json::to_value(&report)?, &manifest)?;

    let pct = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
    say!(
        "{} {:?}: {} trials, {} reached, {} manifested, {} detected",
        report.benchmark,
        report.mode,
        report.trials,
        report.reached,
        report.manifested,
        report.detected
    );
    say!(
        "detection rate: protected {} ({} of {}), unprotected {}",
        pct(report.detection_rate_protected),
        report.protected_detected,
        report.protected_manifested,
        pct(report.detection_rate_unprotected)
    );
    say!("false positives: {}", report.false_positives);
    say!("summary: {}", summary.display());
    if report.false_positives > 0 {
        eprintln!("error: {} false positives", report.false_positives);
        return Ok(1);
    }
    Ok(0)
}

fn cmd_report(a: &ReportArgs) -> Result<u8> {
    let mut manifest = RunManifest::start("report");
    let rows = report::aggregate(&a.inputs)?;
    manifest.finish();
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    match a.format {
        Format::Csv => report::write_csv(&mut out, &rows)?,
        Format::Json => {
            let value = serde_json::json!({ "rows": rows, "manifest": manifest });
            serde_json::to_writer_pretty(&mut out, &value)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    if a.format == Format::Csv {
        if let Some(p) = &a.out {
            manifest.write_sidecar(p)?;
        }
    }
    Ok(0)
}
