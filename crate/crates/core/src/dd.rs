//! Double-double arithmetic: an unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`,
//! giving about 106 bits of significand.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let e = b - (s - a);
    (s, e)
}

#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct ExtendedFloat {
    pub hi: f64,
    pub lo: f64,
}

impl ExtendedFloat {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };
    pub const ONE: Self = Self { hi: 1.0, lo: 0.0 };

    pub const fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    /// Builds a normalized value from an arbitrary pair.
    pub fn from_parts(hi: f64, lo: f64) -> Self {
        let (h, l) = two_sum(hi, lo);
        Self { hi: h, lo: l }
    }

    /// Round to nearest double.
    pub fn to_f64(self) -> f64 {
        if self.lo == 0.0 {
            self.hi
        } else {
            self.hi + self.lo
        }
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn is_zero(self) -> bool {
        self.hi == 0.0 && self.lo == 0.0
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    /// Product with a double, exact up to the final renormalization.
    pub fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let e = e + self.lo * b;
        let (h, l) = fast_two_sum(p, e);
        Self { hi: h, lo: l }
    }

    /// Fused `self + a * b` with `a` extended and `b` a double.
    pub fn add_mul_f64(self, a: Self, b: f64) -> Self {
        self + a.mul_f64(b)
    }
}

impl Neg for ExtendedFloat {
    type Output = Self;
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for ExtendedFloat {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let e = e + t;
        let (s, e) = fast_two_sum(s, e);
        let e = e + f;
        let (h, l) = fast_two_sum(s, e);
        Self { hi: h, lo: l }
    }
}

impl AddAssign for ExtendedFloat {
    fn add_assign(&mut self, b: Self) {
        *self = *self + b;
    }
}

impl Sub for ExtendedFloat {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for ExtendedFloat {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (h, l) = fast_two_sum(p, e);
        Self { hi: h, lo: l }
    }
}

impl PartialOrd for ExtendedFloat {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

impl From<f64> for ExtendedFloat {
    fn from(x: f64) -> Self {
        Self::from_f64(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sum_is_exact() {
        let (s, e) = two_sum(1.0, 1e-20);
        assert_eq!(s, 1.0);
        assert_eq!(e, 1e-20);
    }

    #[test]
    fn tenth_times_ten_keeps_the_residual() {
        let x = ExtendedFloat::from_f64(0.1).mul_f64(10.0);
        // 0.1 in binary is slightly above 1/10, so the exact product exceeds 1.
        assert_eq!(x.hi, 1.0);
        assert!(x.lo > 0.0 && x.lo < 1e-16);
    }

    #[test]
    fn round_trip_of_representable_values() {
        for v in [0.0, 1.0, -3.5, 0.0625, 1e300, f64::MIN_POSITIVE] {
            assert_eq!(ExtendedFloat::from_f64(v).to_f64(), v);
        }
    }

    #[test]
    fn cancellation_is_exact() {
        let a = ExtendedFloat::from_parts(1.0, 1e-30);
        let d = a - ExtendedFloat::ONE;
        assert_eq!(d.to_f64(), 1e-30);
    }
}
