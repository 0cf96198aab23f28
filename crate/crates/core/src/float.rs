//! Binary floating-point model and exponent helpers.

use serde::{Deserialize, Serialize};

/// Which constant bounds the relative error of a single operation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OpBound {
    /// Unit round-off `u`.
    UnitRoundoff,
    /// `ulp(1) = 2u`, valid under every rounding mode.
    #[default]
    UlpOne,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub radix: u32,
    pub precision: u32,
    pub op_bound: OpBound,
}

impl Default for FloatModel {
    fn default() -> Self {
        Self::binary64()
    }
}

impl FloatModel {
    pub const fn binary64() -> Self {
        Self { radix: 2, precision: 53, op_bound: OpBound::UlpOne }
    }

    pub fn with_op_bound(mut self, b: OpBound) -> Self {
        self.op_bound = b;
        self
    }

    /// `u = 2^(1-p) / 2`.
    pub fn unit_roundoff(&self) -> f64 {
        pow2(-(self.precision as i32))
    }

    /// `mu = ulp(1) = 2u`.
    pub fn ulp_one(&self) -> f64 {
        pow2(1 - self.precision as i32)
    }

    /// Per-operation relative error bound used for fresh noise terms.
    pub fn op_eps(&self) -> f64 {
        match self.op_bound {
            OpBound::UnitRoundoff => self.unit_roundoff(),
            OpBound::UlpOne => self.ulp_one(),
        }
    }
}

/// Exact power of two for exponents in the normal and subnormal range.
pub fn pow2(e: i32) -> f64 {
    if e > 1023 {
        f64::INFINITY
    } else if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if e >= -1074 {
        f64::from_bits(1u64 << (e + 1074))
    } else {
        0.0
    }
}

/// Binary exponent `floor(log2|x|)`, with `None` standing for the exponent of zero (minus infinity).
pub fn exponent(x: f64) -> Option<i32> {
    let a = x.abs();
    if a == 0.0 || !a.is_finite() {
        if a.is_infinite() {
            return Some(1024);
        }
        return None;
    }
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        let m = bits & ((1u64 << 52) - 1);
        Some(-1074 + 63 - m.leading_zeros() as i32)
    } else {
        Some(biased - 1023)
    }
}

/// Exponent difference `a - b` clamped at zero, with zero treated as minus infinity.
pub fn exp_gap(a: Option<i32>, b: Option<i32>) -> i64 {
    match (a, b) {
        (None, _) => 0,
        // b is zero: the gap is unbounded.
        (Some(_), None) => i64::MAX / 4,
        (Some(a), Some(b)) => (a as i64 - b as i64).max(0),
    }
}

/// `ulp(x)` for a normal double.
pub fn ulp(x: f64) -> f64 {
    match exponent(x) {
        None => pow2(-1074),
        Some(e) => pow2(e - 52).max(pow2(-1074)),
    }
}

/// Smallest `k` with `2^k >= x`, for positive finite `x`.
pub fn ceil_log2(x: f64) -> i32 {
    let e = exponent(x).expect("ceil_log2 of zero");
    if pow2(e) == x {
        e
    } else {
        e + 1
    }
}
