//! Floating-point abstraction so the whole stack can run at `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type of tensors. Implemented for `f32` and `f64`; everything in
/// the crate that does arithmetic is generic over this trait.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lift an `f64` constant into `Self`. Shorthand for the ubiquitous
    /// "literal in a generic context" conversion.
    fn from_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable in scalar type")
    }

    /// Widen to `f64` (checkpoint storage, metric accumulation).
    fn to_c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Gauss error function, used by the exact GELU. Accurate to roughly
    /// double-precision rounding; computed in `f64` and converted.
    fn erf(self) -> Self {
        Self::from_c(erf_f64(self.to_f64().expect("scalar convertible to f64")))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// erf via the non-alternating Maclaurin series
///
/// ```text
/// erf(x) = (2x / sqrt(pi)) * exp(-x^2) * sum_{n>=0} (2x^2)^n / (2n+1)!!
/// ```
///
/// Every term is positive, so there is no catastrophic cancellation; the
/// series is summed until a term no longer moves the total. Beyond |x| > 6
/// the result is +-1 to well below f64 resolution.
pub fn erf_f64(x: f64) -> f64 {
    if x < 0.0 {
        return -erf_f64(-x);
    }
    if x == 0.0 {
        return 0.0;
    }
    if x > 6.0 {
        return 1.0;
    }
    let two_x2 = 2.0 * x * x;
    let mut term = 1.0_f64; // (2x^2)^n / (2n+1)!! at n = 0
    let mut sum = term;
    let mut n = 1u32;
    loop {
        term *= two_x2 / (2.0 * f64::from(n) + 1.0);
        sum += term;
        if term < sum * 1e-18 || n > 500 {
            break;
        }
        n += 1;
    }
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    two_over_sqrt_pi * x * (-x * x).exp() * sum
}
