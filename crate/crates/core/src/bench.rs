//! The benchmark PDE suite: heat, Poisson, wave and convection-diffusion problems on
//! `[0,1]^d`, discretized with explicit finite differences.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::stencil::{BoundaryCondition, BoundaryKind, GridState, PairTerms, StencilSpec};

/// All 24 two-dimensional benchmark ids.
pub const BENCHMARK_IDS: [&str; 24] = [
    "h1", "h2", "h3", "h4", "h5", "h6", "p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8", "p9", "w1", "w2", "w3", "w4", "w5", "w6", "c1",
    "c2", "c3",
];

/// Number of time steps the suite runs by default.
pub const DEFAULT_STEPS: u64 = 4000;

/// Safety factor applied to the explicit stability limit on the time step.
const SAFETY: f64 = 0.9;

type Exact = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
type Field = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Init = Arc<dyn Fn(usize, &[i64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct BenchmarkDef {
    pub id: String,
    pub spec: StencilSpec,
    pub params: BTreeMap<String, f64>,
    pub dx: f64,
    pub dt: f64,
    init: Init,
}

impl std::fmt::Debug for BenchmarkDef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BenchmarkDef")
            .field("id", &self.id)
            .field("spec", &self.spec)
            .field("params", &self.params)
            .field("dx", &self.dx)
            .field("dt", &self.dt)
            .finish()
    }
}

impl BenchmarkDef {
    pub fn initial_state(&self) -> GridState {
        GridState::from_fn(&self.spec, |a, p| (self.init)(a, p))
    }

    pub fn dims(&self) -> usize {
        self.spec.dims
    }
}

/// Splits `"h1-1d"` into `("h1", 1)` and `"h1"` into `("h1", 2)`.
fn parse_id(id: &str) -> (&str, usize) {
    match id.strip_suffix("-1d") {
        Some(base) => (base, 1),
        None => (id, 2),
    }
}

/// Every accepted benchmark id: the 24 two-dimensional problems, their one-dimensional
/// analogs (`<id>-1d`) and the simple three-point heat kernel `heat1d`.
pub fn all_ids() -> Vec<String> {
    let mut v: Vec<String> = BENCHMARK_IDS.iter().map(|s| s.to_string()).collect();
    v.extend(BENCHMARK_IDS.iter().map(|s| format!("{s}-1d")));
    v.push("heat1d".into());
    v
}

pub fn build_benchmark(id: &str, grid_n: usize) -> Result<BenchmarkDef> {
    if grid_n < 8 {
        return Err(Error::InvalidSpec(format!("grid size {grid_n} is below the minimum of 8")));
    }
    if id == "heat1d" {
        return Ok(simple_heat(grid_n));
    }
    let (base, dims) = parse_id(id);
    if !BENCHMARK_IDS.contains(&base) {
        return Err(Error::UnknownBenchmark(id.to_string()));
    }
    let dx = 1.0 / (grid_n as f64 - 1.0);
    let def = match &base[..1] {
        "h" => heat(base, id, dims, grid_n, dx),
        "p" => poisson(base, id, dims, grid_n, dx),
        "w" => wave(base, id, dims, grid_n, dx),
        _ => convection(base, id, dims, grid_n, dx),
    };
    def.spec.validate()?;
    def.spec.check_stability()?;
    Ok(def)
}

/// The single-array three-point kernel `(0.25, 0.5, 0.25)` with fixed boundaries.
fn simple_heat(n: usize) -> BenchmarkDef {
    let dx = 1.0 / (n as f64 - 1.0);
    let spec = StencilSpec {
        dims: 1,
        arrays: 1,
        lower: vec![0],
        upper: vec![n as i64 - 1],
        pairs: vec![PairTerms { to: 0, from: 0, offsets: vec![vec![-1], vec![0], vec![1]], coeffs: vec![0.25, 0.5, 0.25] }],
        boundary: BoundaryCondition::function(BoundaryKind::DirichletFixed, dx, Arc::new(move |_, p, _| 1.0 + p[0] as f64 * dx)),
    };
    BenchmarkDef { id: "heat1d".into(), spec, params: BTreeMap::new(), dx, dt: 1.0, init: Arc::new(move |_, p| 1.0 + p[0] as f64 * dx) }
}

fn coords(p: &[i64], dx: f64) -> (f64, f64) {
    let x = p[0] as f64 * dx;
    let y = if p.len() > 1 { p[1] as f64 * dx } else { 0.0 };
    (x, y)
}

/// Offsets of the nearest-neighbor Laplacian in evaluation order, with the center first.
fn neighbors(dims: usize) -> Vec<Vec<i32>> {
    let mut v = Vec::new();
    for j in 0..dims {
        for s in [-1, 1] {
            let mut o = vec![0; dims];
            o[j] = s;
            v.push(o);
        }
    }
    v
}

fn laplacian_pair(to: usize, dims: usize, center: f64, nb: f64) -> PairTerms {
    let mut offsets = vec![vec![0; dims]];
    let mut coeffs = vec![center];
    for o in neighbors(dims) {
        offsets.push(o);
        coeffs.push(nb);
    }
    PairTerms { to, from: to, offsets, coeffs }
}

fn point_pair(to: usize, from: usize, dims: usize, c: f64) -> PairTerms {
    PairTerms { to, from, offsets: vec![vec![0; dims]], coeffs: vec![c] }
}

fn bounds(dims: usize, n: usize) -> (Vec<i64>, Vec<i64>) {
    (vec![0; dims], vec![n as i64 - 1; dims])
}

/// Outward normal derivative of `u(., ., t)` on the face crossed by ghost point `q`.
fn normal_derivative(u: &Exact, q: &[i64], n: usize, dx: f64, t: f64) -> f64 {
    const H: f64 = 1e-6;
    let hi = n as i64 - 1;
    let face: Vec<i64> = q.iter().map(|&c| c.clamp(0, hi)).collect();
    let (x, y) = coords(&face, dx);
    let mut g = 0.0;
    for (j, &c) in q.iter().enumerate() {
        let sign = if c < 0 {
            -1.0
        } else if c > hi {
            1.0
        } else {
            continue;
        };
        let d = if j == 0 { (u(x + H, y, t) - u(x - H, y, t)) / (2.0 * H) } else { (u(x, y + H, t) - u(x, y - H, t)) / (2.0 * H) };
        g += sign * d;
    }
    g
}

fn heat(base: &str, id: &str, dims: usize, n: usize, dx: f64) -> BenchmarkDef {
    let alpha = 3.0;
    let zeta = 1.2;
    let dt = SAFETY * dx * dx / (2.0 * dims as f64);
    let r = dt / (dx * dx);
    let exact: Exact = match base {
        "h1" | "h2" => Arc::new(move |x, y, t| 1.0 + x * x + alpha * y * y + zeta * t),
        "h3" => Arc::new(move |x, y, t| 1.0 + x * x + alpha * y * y + zeta * t * t),
        "h4" => Arc::new(|x, y, t| (-PI * PI * t / 2.0).exp() * (PI * (x + y) / 2.0).sin()),
        "h5" => Arc::new(|x, y, t| 4.0 + (-PI * PI * t / 2.0).exp() * (PI * (x + y) / 2.0).cos()),
        _ => Arc::new(|x, y, t| {
            let a = PI * (x + y) / 2.0;
            2.0 + (-PI * PI * t / 2.0).exp() * (a.sin() + a.cos())
        }),
    };
    let f = match base {
        "h1" => zeta - 2.0 - 2.0 * alpha,
        "h3" => 2.0 * zeta - 2.0 - 2.0 * alpha,
        _ => 0.0,
    };
    let neumann = matches!(base, "h4" | "h5" | "h6");
    let mut pairs = vec![laplacian_pair(0, dims, 1.0 - 2.0 * dims as f64 * r, r)];
    let arrays = if f != 0.0 {
        pairs.push(point_pair(0, 1, dims, dt));
        pairs.push(point_pair(1, 1, dims, 1.0));
        2
    } else {
        1
    };
    let boundary = if neumann {
        let u = exact.clone();
        BoundaryCondition::function(BoundaryKind::Neumann, dx, Arc::new(move |_, q, t| normal_derivative(&u, q, n, dx, t as f64 * dt)))
    } else {
        let u = exact.clone();
        BoundaryCondition::function(
            BoundaryKind::DirichletTimeDependent,
            dx,
            Arc::new(move |a, p, t| {
                if a == 1 {
                    return f;
                }
                let (x, y) = coords(p, dx);
                u(x, y, t as f64 * dt)
            }),
        )
    };
    let (lower, upper) = bounds(dims, n);
    let u0 = exact;
    let mut params = BTreeMap::new();
    params.insert("alpha".into(), alpha);
    params.insert("zeta".into(), zeta);
    params.insert("f".into(), f);
    params.insert("r".into(), r);
    BenchmarkDef {
        id: id.into(),
        spec: StencilSpec { dims, arrays, lower, upper, pairs, boundary },
        params,
        dx,
        dt,
        init: Arc::new(move |a, p| {
            if a == 1 {
                return f;
            }
            let (x, y) = coords(p, dx);
            u0(x, y, 0.0)
        }),
    }
}

fn gaussian(amp: f64, cx: f64, cy: f64, k: f64) -> Field {
    Arc::new(move |x, y| amp * (-k * ((x - cx).powi(2) + (y - cy).powi(2))).exp())
}

fn poisson(base: &str, id: &str, dims: usize, n: usize, dx: f64) -> BenchmarkDef {
    let membrane = |fields: Vec<Field>| -> Field { Arc::new(move |x, y| fields.iter().map(|g| g(x, y)).sum()) };
    let p1 = gaussian(4.0, 0.6, 0.6, 5.0);
    let p2 = gaussian(2.0, 0.3, 0.3, 5.0);
    let p3 = gaussian(4.0, 0.3, 0.6, 5.0);
    let zero: Exact = Arc::new(|_, _, _| 0.0);
    let (rhs, exact): (Field, Exact) = match base {
        "p1" => (Arc::new(|_, _| -6.0), Arc::new(|x, y, _| 1.0 + x * x + y * y)),
        "p2" => (Arc::new(|x, y| -6.0 * (2.0 + x + y)), Arc::new(|x, y, _| 1.0 + x.powi(3) + y.powi(3))),
        "p3" => (Arc::new(|_, y| -2.0 - 12.0 * y), Arc::new(|x, y, _| 1.0 + x * x + 2.0 * y.powi(3))),
        "p4" => (p1, zero),
        "p5" => (membrane(vec![p1, p2]), zero),
        "p6" => (membrane(vec![p1, p2, p3]), zero),
        "p7" => (gaussian(10.0, 0.5, 0.5, 1.0 / 0.02), zero),
        "p8" => (Arc::new(|_, _| 0.0), zero),
        _ => (gaussian(20.0, 0.25, 0.25, 1.0 / 0.01), zero),
    };
    let neumann = matches!(base, "p7" | "p8" | "p9");
    let has_rhs = base != "p8";
    let nb = 1.0 / (2.0 * dims as f64);
    let mut lap = laplacian_pair(0, dims, 0.0, nb);
    lap.offsets.remove(0);
    lap.coeffs.remove(0);
    let mut pairs = vec![lap];
    let arrays = if has_rhs {
        pairs.push(point_pair(0, 1, dims, dx * dx * nb));
        pairs.push(point_pair(1, 1, dims, 1.0));
        2
    } else {
        1
    };
    let rhs_b = rhs.clone();
    let boundary = if neumann {
        BoundaryCondition::function(
            BoundaryKind::Neumann,
            dx,
            Arc::new(move |_, q, _| {
                let face: Vec<i64> = q.iter().map(|&c| c.clamp(0, n as i64 - 1)).collect();
                -(5.0 * coords(&face, dx).0).sin()
            }),
        )
    } else {
        let u = exact.clone();
        BoundaryCondition::function(
            BoundaryKind::DirichletFixed,
            dx,
            Arc::new(move |a, p, _| {
                let (x, y) = coords(p, dx);
                if a == 1 {
                    rhs_b(x, y)
                } else {
                    u(x, y, 0.0)
                }
            }),
        )
    };
    let start_from_exact = matches!(base, "p1" | "p2" | "p3");
    let (lower, upper) = bounds(dims, n);
    BenchmarkDef {
        id: id.into(),
        spec: StencilSpec { dims, arrays, lower, upper, pairs, boundary },
        params: BTreeMap::new(),
        dx,
        dt: 1.0,
        init: Arc::new(move |a, p| {
            let (x, y) = coords(p, dx);
            if a == 1 {
                rhs(x, y)
            } else if start_from_exact {
                exact(x, y, 0.0)
            } else {
                0.0
            }
        }),
    }
}

fn wave(base: &str, id: &str, dims: usize, n: usize, dx: f64) -> BenchmarkDef {
    let s2 = 2f64.sqrt();
    let (c, exact): (f64, Exact) = match base {
        "w1" => (1.0, Arc::new(move |x, y, t| (s2 * PI * t).cos() * (PI * x).sin() * (PI * y).sin() + x * x - y * y)),
        "w2" | "w3" => (1.0, Arc::new(move |x, y, t| (s2 * PI * t).sin() * (PI * x).cos() * (PI * y).cos() + x * x - y * y)),
        "w4" => {
            let c = 0.7;
            (c, Arc::new(move |x, y, t| 16.0 + 2.0 * (PI / 4.0 * x).sin() * (PI / 4.0 * y).sin() * (PI / 2.0 * c * c * t).cos()))
        }
        "w5" => {
            let c = 0.7;
            (c, Arc::new(move |x, _, t| 16.0 + (PI / 2.0 * x).sin() * (PI / 2.0 * x).sin() * (PI / 4.0 * c * c * t).cos()))
        }
        _ => {
            let c = 0.7;
            (c, Arc::new(move |x, _, t| 16.0 + 2.0 * (PI / 2.0 * x).sin() * (PI / 4.0 * x).cos() * (PI / 2.0 * c * c * t).sin()))
        }
    };
    let dt = SAFETY * dx / (c * (dims as f64).sqrt());
    let r2 = (c * dt / dx).powi(2);
    let pairs = vec![laplacian_pair(0, dims, 2.0 - 2.0 * dims as f64 * r2, r2), point_pair(0, 1, dims, -1.0), point_pair(1, 0, dims, 1.0)];
    let u = exact.clone();
    let boundary = BoundaryCondition::function(
        BoundaryKind::DirichletTimeDependent,
        dx,
        Arc::new(move |a, p, t| {
            let (x, y) = coords(p, dx);
            // The previous-level array lags by one step and starts equal to u(., 0).
            let level = if a == 1 { t.saturating_sub(1) } else { t };
            u(x, y, level as f64 * dt)
        }),
    );
    let (lower, upper) = bounds(dims, n);
    let mut params = BTreeMap::new();
    params.insert("c".into(), c);
    params.insert("r2".into(), r2);
    BenchmarkDef {
        id: id.into(),
        spec: StencilSpec { dims, arrays: 2, lower, upper, pairs, boundary },
        params,
        dx,
        dt,
        init: Arc::new(move |_, p| {
            let (x, y) = coords(p, dx);
            exact(x, y, 0.0)
        }),
    }
}

fn convection(base: &str, id: &str, dims: usize, n: usize, dx: f64) -> BenchmarkDef {
    let (alpha, zeta) = match base {
        "c1" => (0.8, 0.01),
        "c2" => (0.4, 0.4),
        _ => (0.1, 0.8),
    };
    let d = dims as f64;
    let dt = SAFETY / (2.0 * d * zeta / (dx * dx) + d * alpha / dx);
    let diff = zeta * dt / (dx * dx);
    let adv = alpha * dt / dx;
    let mut offsets = vec![vec![0; dims]];
    let mut coeffs = vec![1.0 - 2.0 * d * diff - d * adv];
    for o in neighbors(dims) {
        let upwind = o.iter().any(|&c| c < 0);
        coeffs.push(if upwind { diff + adv } else { diff });
        offsets.push(o);
    }
    let pairs = vec![PairTerms { to: 0, from: 0, offsets, coeffs }];
    let exact: Exact = Arc::new(move |x, y, t| {
        let s = 4.0 * t + 1.0;
        let ax = x - alpha * t - 0.5;
        let ay = y - alpha * t - 0.5;
        (-(ax * ax + ay * ay) / (zeta * s)).exp() / s
    });
    let u = exact.clone();
    let boundary = BoundaryCondition::function(
        BoundaryKind::DirichletTimeDependent,
        dx,
        Arc::new(move |_, p, t| {
            let (x, y) = coords(p, dx);
            u(x, y, t as f64 * dt)
        }),
    );
    let (lower, upper) = bounds(dims, n);
    let mut params = BTreeMap::new();
    params.insert("alpha".into(), alpha);
    params.insert("zeta".into(), zeta);
    BenchmarkDef {
        id: id.into(),
        spec: StencilSpec { dims, arrays: 1, lower, upper, pairs, boundary },
        params,
        dx,
        dt,
        init: Arc::new(move |_, p| {
            let (x, y) = coords(p, dx);
            exact(x, y, 0.0)
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stencil::{run_iterated, step_iterated, ArrayRole};

    #[test]
    fn every_benchmark_builds_and_is_stable() {
        for id in all_ids() {
            let b = build_benchmark(&id, 16).unwrap_or_else(|e| panic!("{id}: {e}"));
            b.spec.check_stability().unwrap();
            let mut g = b.initial_state();
            run_iterated(&mut g, &b.spec, 20).unwrap();
            assert!(g.all_finite(), "{id}");
        }
    }

    #[test]
    fn unknown_and_tiny() {
        assert!(matches!(build_benchmark("h7", 16), Err(Error::UnknownBenchmark(_))));
        assert!(build_benchmark("h1", 4).is_err());
    }

    #[test]
    fn h1_constants() {
        let b = build_benchmark("h1", 64).unwrap();
        assert_eq!(b.spec.arrays, 2);
        assert_eq!(b.spec.role(1), ArrayRole::Source);
        let r = b.params["r"];
        assert!((r - 0.225).abs() < 1e-12);
        assert!((b.params["f"] - (1.2 - 2.0 - 6.0)).abs() < 1e-12);
        assert_eq!(b.spec.detector_targets(), vec![0]);
    }

    #[test]
    fn wave_uses_a_copy_array() {
        let b = build_benchmark("w1", 32).unwrap();
        assert_eq!(b.spec.role(1), ArrayRole::Copy(0));
        assert_eq!(b.spec.detector_targets(), vec![0]);
        assert!((b.params["r2"] - 0.405).abs() < 1e-12);
    }

    #[test]
    fn convection_center_is_the_safety_margin() {
        let b = build_benchmark("c1", 64).unwrap();
        assert!((b.spec.pairs[0].coeffs[0] - 0.1).abs() < 1e-12);
        let sum: f64 = b.spec.pairs[0].coeffs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn h1_step_matches_a_naive_loop() {
        let b = build_benchmark("h1", 64).unwrap();
        let g0 = b.initial_state();
        let mut g = g0.clone();
        step_iterated(&mut g, &b.spec).unwrap();
        let r = b.params["r"];
        let f = b.params["f"];
        let n = 64usize;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                    let (x, y) = (i as f64 * b.dx, j as f64 * b.dx);
                    1.0 + x * x + 3.0 * y * y + 1.2 * b.dt
                } else {
                    let u = |a: usize, c: usize| g0.data[0][a * n + c];
                    let mut acc = (1.0 - 4.0 * r) * u(i, j);
                    acc += r * u(i - 1, j);
                    acc += r * u(i + 1, j);
                    acc += r * u(i, j - 1);
                    acc += r * u(i, j + 1);
                    acc += b.dt * f;
                    acc
                };
                assert_eq!(g.data[0][i * n + j].to_bits(), expect.to_bits(), "({i},{j})");
            }
        }
    }
}
