//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of images, sinograms and network tensors.
///
/// Implemented for `f32` and `f64`. Training and the verification suites run in
/// `f64`; the projector, phantoms and metrics work in either precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + rustfft::FftNum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::lit(v as f64)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        ToPrimitive::to_f32(&self).unwrap_or(f32::NAN)
    }

    /// `c = op(a)·op(b) (+ c if accumulate)` for row-major `op(a)`: m×k, `op(b)`: k×n.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the operand lengths were checked against the strides above.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

/// Cosine and sine of `theta`, snapped to exact values at multiples of π/2.
///
/// Rotations by quarter turns must map pixel grids onto themselves exactly;
/// `cos(π/2)` evaluated in floating point is ~6e-17, which is enough to break
/// bitwise equality downstream.
pub fn snapped_cos_sin(theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    const SNAP: f64 = 1e-12;
    if c.abs() < SNAP {
        (0.0, s.signum())
    } else if s.abs() < SNAP {
        (c.signum(), 0.0)
    } else {
        (c, s)
    }
}

/// Sum of squares in `f64`, used for norms in diagnostics.
pub fn sum_sq<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

pub fn norm2<T: Scalar>(v: &[T]) -> f64 {
    sum_sq(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turns_are_exact() {
        for q in 0..8 {
            let (c, s) = snapped_cos_sin(q as f64 * std::f64::consts::FRAC_PI_2);
            assert!(c == 0.0 || c.abs() == 1.0);
            assert!(s == 0.0 || s.abs() == 1.0);
            assert_eq!(c.abs() + s.abs(), 1.0);
        }
        let (c, s) = snapped_cos_sin(std::f64::consts::FRAC_PI_4);
        assert!((c - s).abs() < 1e-15);
    }

    #[test]
    fn literals_round_trip() {
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert_eq!(f64::lit(2.0).as_f64(), 2.0);
    }

    #[test]
    fn gemm_matches_naive_products() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum::<f64>();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                assert!((c[i * n + j] - naive(i, j)).abs() < 1e-14);
            }
        }
        // transposed operands stored as their transposes
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut d = vec![1.0; m * n];
        f64::gemm(m, k, n, &at, true, &bt, true, &mut d, true);
        for i in 0..m * n {
            assert!((d[i] - c[i] - 1.0).abs() < 1e-14);
        }
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut cf = vec![0.0f32; m * n];
        f32::gemm(m, k, n, &af, false, &bf, false, &mut cf, false);
        assert!((cf[7] as f64 - c[7]).abs() < 1e-5);
    }
}
