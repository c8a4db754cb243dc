//! Scalar abstraction for prices and valuations.
//!
//! Every mechanism in this crate is generic over a [`Money`] type. The
//! simulation harness uses [`crate::Cents`] (an `i64` count of minor
//! currency units) so that grid prices and the strict `>`/`<` comparisons
//! are exact. Floating point and exact rationals are supported for
//! analysis and tests.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Rational64;
use num_traits::{Num, NumAssign, Signed, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A signed money scalar.
pub trait Money:
    Num
    + NumAssign
    + Signed
    + Copy
    + PartialOrd
    + Sum
    + ToPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts a real amount (already expressed in this type's units)
    /// onto the representable grid. Integers round half away from zero.
    fn quantize(x: f64) -> Option<Self>;

    /// `n` as a money value, for `units * price` products.
    fn from_units(n: u64) -> Self;

    /// Multiplies by a real factor, staying on the grid. Monotone in `self`.
    fn scale(self, factor: f64) -> Self;

    /// The smallest strictly positive step this type can represent, if any.
    fn min_positive() -> Option<Self>;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! int_money {
    ($($t:ty),*) => {$(
        impl Money for $t {
            fn quantize(x: f64) -> Option<Self> {
                if !x.is_finite() {
                    return None;
                }
                let r = x.round();
                if r < <$t>::MIN as f64 || r > <$t>::MAX as f64 {
                    return None;
                }
                Some(r as $t)
            }

            fn from_units(n: u64) -> Self {
                n as $t
            }

            fn scale(self, factor: f64) -> Self {
                ((self as f64) * factor).round() as $t
            }

            fn min_positive() -> Option<Self> {
                Some(1)
            }
        }
    )*};
}

macro_rules! float_money {
    ($($t:ty),*) => {$(
        impl Money for $t {
            fn quantize(x: f64) -> Option<Self> {
                x.is_finite().then_some(x as $t)
            }

            fn from_units(n: u64) -> Self {
                n as $t
            }

            fn scale(self, factor: f64) -> Self {
                self * factor as $t
            }

            fn min_positive() -> Option<Self> {
                None
            }
        }
    )*};
}

int_money!(i64, i128);
float_money!(f32, f64);

impl Money for Rational64 {
    fn quantize(x: f64) -> Option<Self> {
        Rational64::approximate_float(x)
    }

    fn from_units(n: u64) -> Self {
        Rational64::from_integer(n as i64)
    }

    fn scale(self, factor: f64) -> Self {
        let f = Rational64::approximate_float(factor).unwrap_or_else(|| Rational64::from_integer(1));
        self * f
    }

    fn min_positive() -> Option<Self> {
        None
    }
}

/// Total order used for sorting money. Incomparable values (NaN) compare equal;
/// valuations containing them are rejected at construction.
pub fn money_cmp<M: Money>(a: &M, b: &M) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

pub(crate) fn two<M: Money>() -> M {
    M::one() + M::one()
}

pub(crate) fn midpoint<M: Money>(a: M, b: M) -> M {
    (a + b) / two()
}

/// Smallest `k >= 1` such that `k * step` lies above `bound` (`>=` when
/// `inclusive`, `>` otherwise).
pub(crate) fn first_grid_multiple<M: Money>(bound: M, step: M, inclusive: bool) -> u64 {
    let hits = |k: u64| {
        let p = step * M::from_units(k);
        if inclusive {
            p >= bound
        } else {
            p > bound
        }
    };
    let estimate = (bound.as_f64() / step.as_f64()).floor();
    let mut k = if estimate.is_finite() && estimate > 1.0 { estimate as u64 } else { 1 };
    while k > 1 && hits(k - 1) {
        k -= 1;
    }
    while !hits(k) {
        k += 1;
    }
    k
}
