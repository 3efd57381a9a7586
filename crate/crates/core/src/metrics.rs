//! PSNR and SSIM image quality scores.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scalar::Scalar;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(x: &Image<T>, r: &Image<T>) -> Result<()> {
    if x.shape() != r.shape() {
        return Err(Error::ShapeMismatch(format!("image {:?} vs reference {:?}", x.shape(), r.shape())));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(x: &Image<T>, reference: &Image<T>, peak: f64) -> Result<f64> {
    same_shape(x, reference)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak {peak} must be positive")));
    }
    let n = x.data().len() as f64;
    let mse = x.data().iter().zip(reference.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over the positions where the window fits.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, &c)| c * data[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, &c)| c * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`,
/// `K2 = 0.03` and dynamic range `peak`, over all fully covered window positions.
pub fn ssim<T: Scalar>(x: &Image<T>, reference: &Image<T>, peak: f64) -> Result<f64> {
    same_shape(x, reference)?;
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak {peak} must be positive")));
    }
    let a: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = reference.data().iter().map(|v| v.as_f64()).collect();
    let taps = gaussian_taps();
    let f = |v: &[f64]| filter_valid(v, h, w, &taps);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| s * t).collect::<Vec<f64>>();
    let (ma, mb) = (f(&a), f(&b));
    let (saa, sbb, sab) = (f(&prod(&a, &a)), f(&prod(&b, &b)), f(&prod(&a, &b)));
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    for i in 0..ma.len() {
        let (mx, my) = (ma[i], mb[i]);
        let vx = saa[i] - mx * mx;
        let vy = sbb[i] - my * my;
        let cxy = sab[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / ma.len() as f64)
}
