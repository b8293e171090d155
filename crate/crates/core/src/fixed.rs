//! Q16.16 fixed-point arithmetic.
//!
//! Every normalized value between layers is a signed 32-bit integer with 16
//! fractional bits. Multiplies go through a 64-bit intermediate and round to
//! nearest, ties to even. Results that leave the `i32` range saturate, and the
//! caller learns about it through [`Saturations`].

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub const FRAC_BITS: u32 = 16;
pub const ONE_RAW: i32 = 1 << FRAC_BITS;

/// Q16.16 signed fixed-point number.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Fx(pub i32);

impl Fx {
    pub const ZERO: Fx = Fx(0);
    pub const ONE: Fx = Fx(ONE_RAW);
    pub const MAX: Fx = Fx(i32::MAX);
    pub const MIN: Fx = Fx(i32::MIN);

    pub const fn from_raw(raw: i32) -> Self {
        Fx(raw)
    }

    pub const fn raw(self) -> i32 {
        self.0
    }

    /// Exact conversion of an integer; saturates outside `[-32768, 32767]`.
    pub fn from_int(v: i64) -> Self {
        Fx(saturate(v << FRAC_BITS).0)
    }

    /// Nearest representable value, ties to even, saturating.
    pub fn from_f64(v: f64) -> Self {
        let scaled = (v * ONE_RAW as f64).round_ties_even();
        if scaled >= i32::MAX as f64 {
            Fx::MAX
        } else if scaled <= i32::MIN as f64 {
            Fx::MIN
        } else {
            Fx(scaled as i32)
        }
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }
}

impl std::fmt::Display for Fx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Clamps to `i32`; the flag reports whether clamping happened.
#[inline]
pub fn saturate(v: i64) -> (i32, bool) {
    if v > i32::MAX as i64 {
        (i32::MAX, true)
    } else if v < i32::MIN as i64 {
        (i32::MIN, true)
    } else {
        (v as i32, false)
    }
}

/// `v / 2^shift`, rounded to nearest with ties to even.
#[inline]
pub fn shift_round_even(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// `num / den` for `den > 0`, rounded to nearest with ties to even.
#[inline]
pub fn div_round_even(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q & 1 == 1 => q + 1,
        _ => q,
    }
}

/// Q16.16 product, rounded to nearest even, unsaturated.
#[inline]
pub fn mul_wide(a: Fx, b: Fx) -> i64 {
    shift_round_even(a.0 as i64 * b.0 as i64, FRAC_BITS)
}

/// Counts saturation events across a run; safe to share between threads.
#[derive(Debug, Default)]
pub struct Saturations(AtomicU64);

impl Saturations {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, n: u64) {
        if n != 0 {
            self.0.fetch_add(n, Ordering::Relaxed);
        }
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}
