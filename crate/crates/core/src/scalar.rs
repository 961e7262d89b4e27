//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the models and matrices are generic over.
///
/// Implemented for `f32` and `f64`. Checkpoints are written through `f64`,
/// so both widths reload bit-exactly.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless for `f64`, rounding for narrower types.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 is representable in every Scalar")
    }

    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("usize is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable softmax; `out` is overwritten.
pub fn softmax_into<F: Scalar>(logits: &[F], out: &mut Vec<F>) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    out.clear();
    out.extend(logits.iter().map(|&z| (z - max).exp()));
    let total: F = out.iter().copied().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, &mut out);
    out
}

/// `ln Σ exp(z)` without overflow.
pub fn log_sum_exp<F: Scalar>(logits: &[F]) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = logits.iter().map(|&z| (z - max).exp()).sum();
    max + total.ln()
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn squared_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0_f64, 2.0, 3.0]);
        let b = softmax(&[1001.0_f64, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let z = [0.5_f64, -1.0, 2.0];
        let naive = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&z) - naive).abs() < 1e-14);
    }

    #[test]
    fn f32_conversions() {
        assert_eq!(f32::of(0.5), 0.5_f32);
        assert_eq!(f32::of_usize(3).as_f64(), 3.0);
    }
}
