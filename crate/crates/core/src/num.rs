//! Scalar abstraction for the charge and lifetime arithmetic.
//!
//! The power model is written once over [`Scalar`] so the same code runs on
//! `f64` for simulation and on [`Rational64`](num_rational::Rational64) when a
//! test needs exact decimal arithmetic (the measured currents such as 0.1 mA
//! and 0.01 mA are not representable in binary floating point).

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Numeric type usable by the energy model: `f32`, `f64` or an exact rational.
pub trait Scalar:
    Num + Signed + Copy + PartialOrd + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Exact `numer / denom` where the type allows it, nearest value otherwise.
    fn ratio(numer: i64, denom: i64) -> Self {
        Self::from_i64(numer).expect("integer fits scalar")
            / Self::from_i64(denom).expect("integer fits scalar")
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite value fits scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Num
        + Signed
        + Copy
        + PartialOrd
        + Debug
        + FromPrimitive
        + ToPrimitive
        + Send
        + Sync
        + 'static
{
}
