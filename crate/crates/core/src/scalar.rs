//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the models, filters and metrics are generic over.
///
/// Implemented for `f32` and `f64`. Gradient checks run at `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and file payloads.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Name used in configs and manifests.
    const NAME: &'static str;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
            const NAME: &'static str = $name;
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");
