//! Q16.16 scalars, the split-multiplier PE datapath and the affine
//! activation quantizer.
//!
//! Every conversion and product rounds toward negative infinity (an arithmetic
//! right shift), and every value that leaves a 64-bit accumulator saturates to
//! the `i32` range.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FRAC_BITS: u32 = 16;
const SCALE: f64 = (1u64 << FRAC_BITS) as f64;

/// Activation precision of a forward pass or of the PE datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Full32,
    Half16,
}

impl Precision {
    /// Activations consumed per PE per cycle.
    pub fn lanes(self) -> usize {
        match self {
            Precision::Full32 => 1,
            Precision::Half16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Full32 => "full32",
            Precision::Half16 => "half16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Signed Q16.16 fixed-point value. `value = raw / 2^16`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Fx32(i32);

impl Fx32 {
    pub const ZERO: Fx32 = Fx32(0);
    pub const ONE: Fx32 = Fx32(1 << FRAC_BITS);
    pub const MAX: Fx32 = Fx32(i32::MAX);
    pub const MIN: Fx32 = Fx32(i32::MIN);
    /// One unit in the last place, 2^-16.
    pub const ULP: Fx32 = Fx32(1);

    #[inline]
    pub const fn from_raw(raw: i32) -> Self {
        Fx32(raw)
    }

    #[inline]
    pub const fn raw(self) -> i32 {
        self.0
    }

    /// `saturate(floor(x * 2^16))`. NaN maps to zero.
    pub fn from_real(x: f64) -> Self {
        let scaled = (x * SCALE).floor();
        // `as` saturates at the i64 bounds and sends NaN to 0.
        Self::saturate(scaled as i64)
    }

    #[inline]
    pub fn to_real(self) -> f64 {
        self.0 as f64 / SCALE
    }

    /// Clamps a wide raw code into the representable range.
    #[inline]
    pub fn saturate(raw: i64) -> Self {
        Fx32(raw.clamp(i32::MIN as i64, i32::MAX as i64) as i32)
    }

    #[inline]
    pub fn saturate_i128(raw: i128) -> Self {
        Fx32(raw.clamp(i32::MIN as i128, i32::MAX as i128) as i32)
    }

    /// Converts a Q32.32 accumulator value (a sum of raw products) back to
    /// Q16.16 with floor rounding and saturation.
    #[inline]
    pub fn from_product_sum(acc: i64) -> Self {
        Self::saturate(acc >> FRAC_BITS)
    }

    #[inline]
    pub fn saturating_add(self, rhs: Self) -> Self {
        Fx32(self.0.saturating_add(rhs.0))
    }

    #[inline]
    pub fn saturating_sub(self, rhs: Self) -> Self {
        Fx32(self.0.saturating_sub(rhs.0))
    }

    /// `saturate(floor(a * b / 2^16))` with a 64-bit intermediate product.
    #[inline]
    pub fn saturating_mul(self, rhs: Self) -> Self {
        Self::from_product_sum(self.0 as i64 * rhs.0 as i64)
    }

    #[inline]
    pub fn abs(self) -> Self {
        Fx32(self.0.saturating_abs())
    }

    #[inline]
    pub fn max(self, other: Self) -> Self {
        Fx32(self.0.max(other.0))
    }

    #[inline]
    pub fn min(self, other: Self) -> Self {
        Fx32(self.0.min(other.0))
    }
}

impl fmt::Debug for Fx32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fx32({} = {:#010x})", self.to_real(), self.0)
    }
}

impl fmt::Display for Fx32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_real(), f)
    }
}

impl Add for Fx32 {
    type Output = Fx32;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.saturating_add(rhs)
    }
}

impl AddAssign for Fx32 {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sub for Fx32 {
    type Output = Fx32;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.saturating_sub(rhs)
    }
}

impl SubAssign for Fx32 {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl Mul for Fx32 {
    type Output = Fx32;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.saturating_mul(rhs)
    }
}

impl Neg for Fx32 {
    type Output = Fx32;
    #[inline]
    fn neg(self) -> Self {
        Fx32(self.0.saturating_neg())
    }
}

pub fn fx_from_real(x: f64) -> Fx32 {
    Fx32::from_real(x)
}

pub fn fx_to_real(x: Fx32) -> f64 {
    x.to_real()
}

pub fn fx_mul(a: Fx32, b: Fx32) -> Fx32 {
    a * b
}

/// Zero-point re-centred 16-bit activation code. Its real value depends on
/// the [`Quantizer`] that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Fx16(i16);

impl Fx16 {
    #[inline]
    pub const fn from_raw(raw: i16) -> Self {
        Fx16(raw)
    }

    #[inline]
    pub const fn raw(self) -> i16 {
        self.0
    }
}

/// Full-precision PE step: `acc + act * w`, computed the way the PE does it
/// with two 32x16 multipliers. The upper half of the activation is signed,
/// the lower half unsigned; the upper partial product is shifted left by 16
/// and added to the lower one.
#[inline]
pub fn pe_mac_full(act: Fx32, w: Fx32, acc: i64) -> i64 {
    let hi = (act.raw() >> 16) as i16;
    let lo = (act.raw() & 0xFFFF) as u16;
    let w = w.raw() as i64;
    let upper = (hi as i64 * w) << 16;
    let lower = lo as i64 * w;
    let product = upper + lower;
    debug_assert!(acc.checked_add(product).is_some(), "PE accumulator overflow");
    acc.wrapping_add(product)
}

/// Half-precision PE step: each of the two 32x16 multipliers takes one
/// 16-bit activation with its own weight, so a PE covers two matrix columns
/// per step. Both products land in the same output accumulator.
#[inline]
pub fn pe_mac_half(act_a: Fx16, w_a: Fx32, act_b: Fx16, w_b: Fx32, acc: i64) -> i64 {
    let product = act_a.raw() as i64 * w_a.raw() as i64 + act_b.raw() as i64 * w_b.raw() as i64;
    debug_assert!(acc.checked_add(product).is_some(), "PE accumulator overflow");
    acc.wrapping_add(product)
}

/// Affine activation quantizer `code = floor(a / delta) + z`.
///
/// The observed range lives on the Q16.16 grid, so the step is kept as a raw
/// Q16.16 code as well: `(|a_min| + |a_max|) / 2^n` rounded up to the next
/// multiple of 2^-16 (exact whenever the range allows it). With the step on
/// the grid every dequantized activation is an exact `Fx32`, and the integer
/// half-precision MVM reproduces the 32-bit MVM on dequantized inputs bit
/// for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantizer {
    bits: u32,
    min: Fx32,
    max: Fx32,
    step_raw: i64,
    zero_point: i64,
}

impl Quantizer {
    pub fn fit(a_min: f64, a_max: f64, bits: u32) -> Result<Self> {
        if !(a_min < a_max) {
            return Err(Error::DegenerateRange { min: a_min, max: a_max });
        }
        Self::fit_fx(Fx32::from_real(a_min), Fx32::from_real(a_max), bits)
    }

    pub fn fit_fx(min: Fx32, max: Fx32, bits: u32) -> Result<Self> {
        if bits != 8 && bits != 16 {
            return Err(Error::UnsupportedBits(bits));
        }
        if min >= max {
            return Err(Error::DegenerateRange {
                min: min.to_real(),
                max: max.to_real(),
            });
        }
        let span = (min.raw() as i64).abs() + (max.raw() as i64).abs();
        let levels = 1i64 << bits;
        let step_raw = (span + levels - 1) / levels;
        let zero_point = (-(min.raw() as i64)).div_euclid(step_raw);
        Ok(Quantizer {
            bits,
            min,
            max,
            step_raw,
            zero_point,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn min(&self) -> Fx32 {
        self.min
    }

    pub fn max(&self) -> Fx32 {
        self.max
    }

    /// Step size delta as a real number.
    pub fn delta(&self) -> f64 {
        self.step_raw as f64 / SCALE
    }

    /// Step size as a raw Q16.16 code.
    pub fn step_raw(&self) -> i64 {
        self.step_raw
    }

    pub fn zero_point(&self) -> i64 {
        self.zero_point
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    fn half_range(&self) -> i64 {
        1i64 << (self.bits - 1)
    }

    /// `floor(a / delta) + z` before clamping.
    pub fn unclamped_code(&self, a: Fx32) -> i64 {
        (a.raw() as i64).div_euclid(self.step_raw) + self.zero_point
    }

    /// Unsigned code in `[0, 2^n - 1]`.
    pub fn code(&self, a: Fx32) -> i64 {
        self.unclamped_code(a).clamp(0, self.max_code())
    }

    /// Quantizes and re-centres to signed storage: `code - 2^(n-1)`.
    pub fn quantize(&self, a: Fx32) -> Fx16 {
        Fx16((self.code(a) - self.half_range()) as i16)
    }

    pub fn quantize_real(&self, a: f64) -> Fx16 {
        self.quantize(Fx32::from_real(a))
    }

    /// Constant added to a stored code to recover `code - z`. The MVM folds
    /// `offset * sum(w)` into the accumulator instead of correcting each MAC.
    pub fn offset(&self) -> i64 {
        self.half_range() - self.zero_point
    }

    /// `(stored + 2^(n-1) - z) * delta`.
    pub fn dequantize(&self, q: Fx16) -> Fx32 {
        Fx32::saturate((q.raw() as i64 + self.offset()) * self.step_raw)
    }

    /// Scales a Q32.32-style accumulator of `stored * w` products (with the
    /// offset already folded in) back to a Q16.16 value.
    pub(crate) fn rescale(&self, acc: i64) -> i64 {
        ((acc as i128 * self.step_raw as i128) >> FRAC_BITS) as i64
    }
}
