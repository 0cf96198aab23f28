//! Closed intervals with outward rounding.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Neg};

use crate::float::exponent;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const ZERO: Self = Self { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "inverted interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    /// `c * [lo, hi]`, rounded outward.
    pub fn scale(self, c: f64) -> Self {
        let a = outward(c, self.lo);
        let b = outward(c, self.hi);
        Self { lo: a.0.min(b.0), hi: a.1.max(b.1) }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(0.0)
    }

    pub fn encloses(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Largest magnitude of any member.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// Smallest magnitude of any member (zero when the interval straddles zero).
    pub fn mig(&self) -> f64 {
        if self.contains_zero() {
            0.0
        } else {
            self.lo.abs().min(self.hi.abs())
        }
    }

    /// Binary exponent of the largest magnitude, `None` for the zero interval.
    pub fn exp_upper(&self) -> Option<i32> {
        exponent(self.mag())
    }

    /// Binary exponent of the smallest magnitude, `None` when it is zero.
    pub fn exp_lower(&self) -> Option<i32> {
        exponent(self.mig())
    }

    pub fn hull(self, o: Self) -> Self {
        Self { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    /// Overlap of two enclosures of the same quantity.
    pub fn meet(self, o: Self) -> Self {
        Self { lo: self.lo.max(o.lo), hi: self.hi.min(o.hi) }
    }
}

/// Enclosure of the exact product `c * x`.
fn outward(c: f64, x: f64) -> (f64, f64) {
    let (p, e) = crate::dd::two_prod(c, x);
    if e == 0.0 || !p.is_finite() {
        (p, p)
    } else {
        (down(p), up(p))
    }
}

#[inline]
fn down(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        x
    } else {
        x.next_down()
    }
}

#[inline]
fn up(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        x
    } else {
        x.next_up()
    }
}

impl Add for Interval {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let lo = self.lo + o.lo;
        let hi = self.hi + o.hi;
        let lo = if two_sum_exact(self.lo, o.lo, lo) { lo } else { lo.next_down() };
        let hi = if two_sum_exact(self.hi, o.hi, hi) { hi } else { hi.next_up() };
        Self { lo, hi }
    }
}

#[inline]
fn two_sum_exact(a: f64, b: f64, s: f64) -> bool {
    let (_, e) = crate::dd::two_sum(a, b);
    e == 0.0 && s.is_finite()
}

impl Neg for Interval {
    type Output = Self;
    fn neg(self) -> Self {
        Self { lo: -self.hi, hi: -self.lo }
    }
}

/// Interval sum of a slice, rounded outward.
pub fn sum(items: &[Interval]) -> Interval {
    items.iter().fold(Interval::ZERO, |a, &b| a + b)
}
