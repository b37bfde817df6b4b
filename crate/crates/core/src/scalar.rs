//! Storage scalar abstraction.
//!
//! Vectors are stored in a generic float type `T` (normally `f32`), while every
//! reduction (dot products, distances, means, softmax state) accumulates in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A floating point type usable for KV-cache storage.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    #[inline]
    fn widen(self) -> f64 {
        // Float -> f64 never fails for the implemented types.
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Independent accumulators per reduction; enough to keep the FP adders busy.
const LANES: usize = 16;

/// Sums `f(a[i], b[i])` over `LANES` interleaved accumulators, combined pairwise.
#[inline(always)]
fn reduce<A: Copy, B: Copy>(a: &[A], b: &[B], f: impl Fn(A, B) -> f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..LANES {
            acc[j] += f(x[j], y[j]);
        }
    }
    for (j, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[j] += f(x, y);
    }
    fold(acc)
}

/// Pairwise sum of the accumulators.
#[inline(always)]
fn fold(mut acc: [f64; LANES]) -> f64 {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for j in 0..width {
            acc[j] += acc[j + width];
        }
    }
    acc[0]
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    reduce(a, b, |x: T, y: T| x.widen() * y.widen())
}

/// Dot product of an `f64` vector with a stored row.
#[inline]
pub fn dot_mixed<T: Scalar>(a: &[f64], b: &[T]) -> f64 {
    reduce(a, b, |x: f64, y: T| x * y.widen())
}

/// Squared Euclidean distance with `f64` accumulation.
///
/// Every nearest-centroid decision in the crate goes through this function, so
/// audits that recompute assignments see bit-identical distances.
#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    reduce(a, b, |x: T, y: T| {
        let d = x.widen() - y.widen();
        d * d
    })
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative L2 error `|a - b| / |b|`, falling back to the absolute error when `b` is zero.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base = norm(b);
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

pub fn widen_vec<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.widen()).collect()
}

pub fn narrow_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::narrow(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_match_naive_sums() {
        let a: Vec<f32> = (0..13).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..13).map(|i| (i as f32).sin()).collect();
        let naive_dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let naive_dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum();
        assert!((dot(&a, &b) - naive_dot).abs() < 1e-12);
        assert!((sq_dist(&a, &b) - naive_dist).abs() < 1e-12);
        let wide = widen_vec(&a);
        assert!((dot_mixed(&wide, &b) - naive_dot).abs() < 1e-12);
    }

    #[test]
    fn rel_error_of_zero_reference_is_absolute() {
        assert_eq!(rel_error(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
        assert_eq!(rel_error(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }
}
