//! Same-size 2D cross-correlation (zero padding, stride 1) via im2col and GEMM.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel counts, spatial size and (odd, square) kernel size of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::InvalidParameter(format!("kernel size {} must be odd", self.k)));
        }
        if self.c_in == 0 || self.c_out == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.height * self.width
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfolds `[c_in, H, W]` into `[c_in·k·k, H·W]`.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape) -> Vec<T> {
    let (h, w, k) = (s.height, s.width, s.k);
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); s.patch() * hw];
    for c in 0..s.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for a in 0..k {
            for b in 0..k {
                let row = &mut col[((c * k + a) * k + b) * hw..][..hw];
                let (di, dj) = (a as isize - r, b as isize - r);
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[i * w..][..w];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j0..j1 {
                        dst[j] = src[(j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds `[c_in·k·k, H·W]` back onto `[c_in, H, W]`.
fn col2im<T: Scalar>(col: &[T], s: &ConvShape) -> Vec<T> {
    let (h, w, k) = (s.height, s.width, s.k);
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); s.input_len()];
    for c in 0..s.c_in {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for a in 0..k {
            for b in 0..k {
                let row = &col[((c * k + a) * k + b) * hw..][..hw];
                let (di, dj) = (a as isize - r, b as isize - r);
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..][..w];
                    let dst = &mut plane[si as usize * w..][..w];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j0..j1 {
                        dst[(j as isize + dj) as usize] += src[j];
                    }
                }
            }
        }
    }
    x
}

fn check<T>(s: &ConvShape, x: &[T], xl: usize, wt: &[T]) -> Result<()> {
    s.validate()?;
    if x.len() != xl || wt.len() != s.weight_len() {
        return Err(Error::ShapeMismatch(format!(
            "conv {s:?}: operand of {} values (want {xl}), weights {} (want {})",
            x.len(),
            wt.len(),
            s.weight_len()
        )));
    }
    Ok(())
}

/// `y[o] = Σ_c x[c] ⋆ w[o, c]`.
pub fn conv2d<T: Scalar>(x: &[T], weight: &[T], s: &ConvShape) -> Result<Vec<T>> {
    check(s, x, s.input_len(), weight)?;
    let hw = s.height * s.width;
    let mut y = vec![T::zero(); s.output_len()];
    if s.k == 1 {
        T::gemm(s.c_out, s.c_in, hw, weight, false, x, false, &mut y, false);
    } else {
        let col = im2col(x, s);
        T::gemm(s.c_out, s.patch(), hw, weight, false, &col, false, &mut y, false);
    }
    Ok(y)
}

/// Gradient with respect to the input, given the output gradient.
pub fn conv2d_grad_input<T: Scalar>(grad_y: &[T], weight: &[T], s: &ConvShape) -> Result<Vec<T>> {
    check(s, grad_y, s.output_len(), weight)?;
    let hw = s.height * s.width;
    if s.k == 1 {
        let mut gx = vec![T::zero(); s.input_len()];
        T::gemm(s.c_in, s.c_out, hw, weight, true, grad_y, false, &mut gx, false);
        return Ok(gx);
    }
    let mut gcol = vec![T::zero(); s.patch() * hw];
    T::gemm(s.patch(), s.c_out, hw, weight, true, grad_y, false, &mut gcol, false);
    Ok(col2im(&gcol, s))
}

/// Gradient with respect to the weights, given the input and the output gradient.
pub fn conv2d_grad_weight<T: Scalar>(x: &[T], grad_y: &[T], s: &ConvShape) -> Result<Vec<T>> {
    s.validate()?;
    if x.len() != s.input_len() || grad_y.len() != s.output_len() {
        return Err(Error::ShapeMismatch(format!("conv {s:?}: input or output gradient has the wrong length")));
    }
    let hw = s.height * s.width;
    let mut gw = vec![T::zero(); s.weight_len()];
    if s.k == 1 {
        T::gemm(s.c_out, hw, s.c_in, grad_y, false, x, true, &mut gw, false);
    } else {
        let col = im2col(x, s);
        T::gemm(s.c_out, hw, s.patch(), grad_y, false, &col, true, &mut gw, false);
    }
    Ok(gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn direct(x: &[f64], w: &[f64], s: &ConvShape) -> Vec<f64> {
        let (h, wd, k) = (s.height as isize, s.width as isize, s.k as isize);
        let r = k / 2;
        let mut y = vec![0.0; s.output_len()];
        for o in 0..s.c_out {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..s.c_in {
                        for a in 0..k {
                            for b in 0..k {
                                let (si, sj) = (i + a - r, j + b - r);
                                if si >= 0 && si < h && sj >= 0 && sj < wd {
                                    let xv = x[(c * s.height + si as usize) * s.width + sj as usize];
                                    acc += xv * w[((o * s.c_in + c) * s.k + a as usize) * s.k + b as usize];
                                }
                            }
                        }
                    }
                    y[(o * s.height + i as usize) * s.width + j as usize] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn matches_direct_cross_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c_in, c_out, height, width, k) in [(1, 1, 5, 5, 3), (3, 2, 7, 6, 3), (2, 4, 6, 9, 5), (3, 2, 4, 4, 1)] {
            let s = ConvShape { c_in, c_out, height, width, k };
            let x = rand_vec(&mut rng, s.input_len());
            let w = rand_vec(&mut rng, s.weight_len());
            let fast = conv2d(&x, &w, &s).unwrap();
            let slow = direct(&x, &w, &s);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_are_adjoint_to_the_forward_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3, 5] {
            let s = ConvShape { c_in: 2, c_out: 3, height: 7, width: 5, k };
            let x = rand_vec(&mut rng, s.input_len());
            let w = rand_vec(&mut rng, s.weight_len());
            let g = rand_vec(&mut rng, s.output_len());
            let y = conv2d(&x, &w, &s).unwrap();
            let gx = conv2d_grad_input(&g, &w, &s).unwrap();
            let gw = conv2d_grad_weight(&x, &g, &s).unwrap();
            let lhs = dot(&y, &g);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-12 * lhs.abs().max(1.0));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let s = ConvShape { c_in: 1, c_out: 1, height: 4, width: 4, k: 2 };
        assert!(conv2d(&[0.0; 16], &[0.0; 4], &s).is_err());
        let s = ConvShape { k: 3, ..s };
        assert!(conv2d(&[0.0; 15], &[0.0; 9], &s).is_err());
        assert!(conv2d(&[0.0; 16], &[0.0; 8], &s).is_err());
    }
}
