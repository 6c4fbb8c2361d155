use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element type: `f32` for normal runs, `f64` for verification builds.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Pre-softmax fill for disallowed attention entries.
    const MASK_FILL: Self;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const MASK_FILL: Self = -1e9;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const MASK_FILL: Self = -1e9;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
