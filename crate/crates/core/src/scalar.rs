//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar usable for log-domain probability arithmetic.
///
/// Implemented for `f32` and `f64`. All file formats are `f64` on disk and
/// are converted at the boundary.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Tolerance for checking that a distribution sums to one.
    const NORM_TOL: f64;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f64 {
    const NORM_TOL: f64 = 1e-9;
}

impl Scalar for f32 {
    const NORM_TOL: f64 = 1e-5;
}

/// Numerically stable `log Σ exp(x_i)`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    log_sum_exp_scaled(xs, F::one())
}

/// `log Σ exp(scale · x_i)` without materializing the scaled vector.
pub fn log_sum_exp_scaled<F: Scalar>(xs: &[F], scale: F) -> F {
    let max = xs
        .iter()
        .map(|&x| x * scale)
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    if max == F::neg_infinity() {
        return F::neg_infinity();
    }
    if max == F::infinity() {
        return F::infinity();
    }
    let sum: F = xs.iter().map(|&x| (x * scale - max).exp()).sum();
    max + sum.ln()
}

/// Stable `1 / (1 + exp(x))`.
pub fn logistic_complement<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        let e = (-x).exp();
        e / (F::one() + e)
    } else {
        F::one() / (F::one() + x.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_on_small_inputs() {
        let xs = [0.1_f64, -2.0, 3.5];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_handles_neg_infinity_and_huge_spread() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[0.0_f64, -1e4, f64::NEG_INFINITY]);
        assert_eq!(v, 0.0);
        let big = log_sum_exp(&[1000.0_f64, 1000.0]);
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn lse_scaled_equals_lse_of_scaled() {
        let xs = [-0.2_f64, -1.7, -0.9];
        let scaled: Vec<f64> = xs.iter().map(|x| x * 2.0).collect();
        assert!((log_sum_exp_scaled(&xs, 2.0) - log_sum_exp(&scaled)).abs() < 1e-15);
    }

    #[test]
    fn logistic_complement_is_stable() {
        assert!((logistic_complement(0.0_f64) - 0.5).abs() < 1e-16);
        assert!(logistic_complement(800.0_f64) >= 0.0);
        assert!((logistic_complement(-800.0_f64) - 1.0).abs() < 1e-16);
        let x = 1.3_f64;
        assert!((logistic_complement(x) - 1.0 / (1.0 + x.exp())).abs() < 1e-15);
    }

    #[test]
    fn works_for_f32() {
        let v = log_sum_exp(&[0.0_f32, 0.0]);
        assert!((v - 2f32.ln()).abs() < 1e-6);
    }
}
