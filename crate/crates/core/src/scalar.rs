//! Scalar abstraction so every numeric path can run at 32-bit (training
//! speed) or 64-bit (finite-difference verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Default
    + Debug
    + Display
    + 'static
{
    const BITS: u32;

    /// Lossy conversion from an f64 literal.
    fn lit(v: f64) -> Self;

    fn to_f64x(self) -> f64;

    fn from_usize_(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64x(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64x(self) -> f64 {
        self
    }
}

/// max(|a|, |b|, floor)-relative error, the comparison rule used by every
/// gradient check in the crate.
pub fn rel_err<S: Real>(analytic: S, numeric: S) -> f64 {
    let a = analytic.to_f64x();
    let n = numeric.to_f64x();
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_roundtrip() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(<f32 as Real>::BITS, 32);
    }

    #[test]
    fn rel_err_floor_handles_zero() {
        assert_eq!(rel_err(0.0f64, 0.0f64), 0.0);
        assert!(rel_err(1.0f64, 1.0f64 + 1e-12) < 1e-9);
    }
}
