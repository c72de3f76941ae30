use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of tensors and parameters.
///
/// Models are stored and trained in `f32`; gradient checks cast a model to
/// `f64`.
///
/// `exp` and `ln` go through `libm` directly. `num_traits::Float` switches to
/// the platform implementations whenever any crate in the build enables its
/// `std` feature, which would make results depend on the dependency graph.
pub trait Real:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn exp_libm(self) -> Self;
    fn ln_libm(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_libm(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn ln_libm(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp_libm(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln_libm(self) -> Self {
        libm::log(self)
    }
}
