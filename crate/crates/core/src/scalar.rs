//! Floating-point scalar abstraction shared by the posterior and test-statistic math.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Beta, Distribution};

/// Real scalar used by posteriors and likelihood-ratio statistics: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Draws one value from `Beta(alpha, beta)`.
    ///
    /// Both parameters must be strictly positive and finite.
    fn sample_beta<R: Rng + ?Sized>(alpha: Self, beta: Self, rng: &mut R) -> Self;

    /// Lossless for every integer count this crate produces (< 2^24 for `f32`).
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable as float")
    }

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable as float")
    }
}

impl Scalar for f64 {
    fn sample_beta<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
        Beta::new(alpha, beta)
            .expect("beta parameters must be positive")
            .sample(rng)
    }
}

impl Scalar for f32 {
    fn sample_beta<R: Rng + ?Sized>(alpha: f32, beta: f32, rng: &mut R) -> f32 {
        Beta::new(alpha, beta)
            .expect("beta parameters must be positive")
            .sample(rng)
    }
}
