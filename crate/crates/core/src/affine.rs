//! First-order affine forms `x0 + sum x_i eps_i` with one fresh noise symbol per rounding.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::float::FloatModel;
use crate::interval::Interval;

static NEXT_NOISE: AtomicU64 = AtomicU64::new(1);

/// Identifier of a formal noise variable in `[-1, 1]`.
pub type NoiseId = u64;

pub fn fresh_noise() -> NoiseId {
    NEXT_NOISE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AffineForm {
    pub central: f64,
    pub noise: BTreeMap<NoiseId, f64>,
}

impl AffineForm {
    /// An exactly known value.
    pub fn exact(x: f64) -> Self {
        Self { central: x, noise: BTreeMap::new() }
    }

    /// A value carrying one rounding error of the input conversion.
    pub fn rounded_input(x: f64, model: &FloatModel) -> Self {
        let mut f = Self::exact(x);
        let c = x.abs() * model.op_eps();
        if c != 0.0 {
            f.noise.insert(fresh_noise(), c);
        }
        f
    }

    /// `sigma(x)`: the noise symbols present.
    pub fn sigma(&self) -> impl Iterator<Item = NoiseId> + '_ {
        self.noise.keys().copied()
    }

    /// `gamma(x, eps)`: the coefficient of one symbol, zero when absent.
    pub fn gamma(&self, id: NoiseId) -> f64 {
        self.noise.get(&id).copied().unwrap_or(0.0)
    }

    /// `rad = sum |x_i|`, rounded up.
    pub fn radius(&self) -> f64 {
        let mut r = 0.0f64;
        for c in self.noise.values().filter(|c| **c != 0.0) {
            r = (r + c.abs()).next_up();
        }
        r
    }

    pub fn to_interval(&self) -> Interval {
        let r = self.radius();
        Interval::new((self.central - r).next_down(), (self.central + r).next_up())
    }

    /// Upper bound on `|x|` over the concretization.
    pub fn magnitude_bound(&self) -> f64 {
        let r = self.radius();
        if r == 0.0 {
            self.central.abs()
        } else {
            (self.central.abs() + r).next_up()
        }
    }

    pub fn negate(&self) -> Self {
        Self { central: -self.central, noise: self.noise.iter().map(|(&k, &v)| (k, -v)).collect() }
    }
}

/// `o(alpha * x)`: propagates every coefficient by `alpha` and adds one fresh symbol
/// with coefficient `|alpha x| * eps`.
pub fn affine_scale(x: &AffineForm, alpha: f64, model: &FloatModel) -> AffineForm {
    let mut out = AffineForm { central: alpha * x.central, noise: x.noise.iter().map(|(&k, &v)| (k, alpha * v)).collect() };
    let fresh = round_up_mul(alpha.abs() * x.magnitude_bound(), model.op_eps());
    out.noise.insert(fresh_noise(), fresh);
    out
}

/// `o(x + y)`: superposes coefficients of shared symbols, keeps the union, adds one fresh
/// symbol with coefficient `|x + y| * eps`.
pub fn affine_add(x: &AffineForm, y: &AffineForm, model: &FloatModel) -> AffineForm {
    let mut noise = x.noise.clone();
    for (&k, &v) in &y.noise {
        *noise.entry(k).or_insert(0.0) += v;
    }
    let mut out = AffineForm { central: x.central + y.central, noise };
    let fresh = round_up_mul(out.magnitude_bound(), model.op_eps());
    out.noise.insert(fresh_noise(), fresh);
    out
}

fn round_up_mul(a: f64, b: f64) -> f64 {
    let p = a * b;
    if p == 0.0 {
        0.0
    } else {
        p.next_up()
    }
}
