//! Scalar abstraction: every numeric routine in this crate is generic over
//! [`Scalar`], implemented for `f32` and `f64`.
//!
//! `f32` is the working precision of the toy pipeline (training, attacks,
//! purification); `f64` is used wherever oracle-grade tolerances matter.

use ndarray::LinalgScalar;
use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;

/// Floating-point scalar usable across FFTs, linear algebra and sampling.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + rustfft::FftNum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    /// Lossless-enough conversion from `f64` (exact for representable values).
    fn from_f64_c(v: f64) -> Self;
    /// Widening conversion to `f64` (exact for both supported types).
    fn to_f64_c(self) -> f64;
    /// One standard-normal draw from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64_c(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64_c(self) -> f64 {
                self as f64
            }
            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample::<$t, _>(rand_distr::StandardNormal)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
