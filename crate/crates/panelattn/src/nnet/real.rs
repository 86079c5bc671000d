//! Network float abstraction.
//!
//! The network runs in a caller-chosen precision (`f32` for training speed,
//! `f64` for gradient-oracle tests), while all operator construction and
//! exponential math stays in `f64` regardless.

/// Scalar type of network activations and parameters.
pub trait Real: ndarray::NdFloat {
    fn of(x: f64) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to64(self) -> f64 {
        self
    }
}
