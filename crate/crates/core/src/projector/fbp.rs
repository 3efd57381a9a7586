//! Equiangular fan-beam filtered backprojection.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::projector::{FanBeamGeometry, Sinogram};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FbpWindow {
    #[default]
    Ramlak,
    Hann,
}

/// Precomputed ramp filter for one geometry.
///
/// Reconstruction follows the classical equiangular recipe: weight each
/// projection by `dso · cos γ`, convolve along bins with the fan-beam ramp
/// kernel (via zero-padded FFT), then back-project pixel by pixel with the
/// `1/L²` distance weight, `L` being the source-to-pixel distance.
pub struct FbpFilter<T: Scalar> {
    geom: FanBeamGeometry,
    padded: usize,
    spectrum: Vec<Complex<T>>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> FbpFilter<T> {
    pub fn new(geom: &FanBeamGeometry, window: FbpWindow) -> Result<Self> {
        geom.validate()?;
        let nb = geom.n_bins;
        if nb < 4 {
            return Err(Error::InvalidGeometry(format!("FBP needs at least 4 bins, got {nb}")));
        }
        let padded = (2 * nb).next_power_of_two();
        let alpha = geom.det_pitch;
        let kernel = |k: usize| -> f64 {
            if k == 0 {
                1.0 / (8.0 * alpha * alpha)
            } else if k % 2 == 0 {
                0.0
            } else {
                let s = (k as f64 * alpha).sin();
                -1.0 / (2.0 * std::f64::consts::PI.powi(2) * s * s)
            }
        };
        let mut taps = vec![Complex::new(T::zero(), T::zero()); padded];
        taps[0].re = T::lit(kernel(0));
        for k in 1..nb {
            taps[k].re = T::lit(kernel(k));
            taps[padded - k].re = T::lit(kernel(k));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        fft.process(&mut taps);
        if window == FbpWindow::Hann {
            for (f, c) in taps.iter_mut().enumerate() {
                let folded = f.min(padded - f) as f64;
                let w = 0.5 * (1.0 + (std::f64::consts::PI * folded / (padded as f64 / 2.0)).cos());
                *c = *c * T::lit(w);
            }
        }
        Ok(Self {
            geom: geom.clone(),
            padded,
            spectrum: taps,
            fft,
            ifft,
        })
    }

    /// Cosine-weighted, ramp-filtered projections, same layout as the input.
    pub fn filter(&self, sino: &Sinogram<T>) -> Result<Vec<T>> {
        sino.check_geometry(&self.geom)?;
        let (nb, nv) = self.geom.sino_shape();
        let scale = T::lit(self.geom.det_pitch / self.padded as f64);
        let cos_w: Vec<T> = (0..nb)
            .map(|b| T::lit(self.geom.dso * self.geom.bin_angle(b).cos()))
            .collect();
        let columns: Vec<Vec<T>> = (0..nv)
            .into_par_iter()
            .map(|v| {
                let mut buf = vec![Complex::new(T::zero(), T::zero()); self.padded];
                for b in 0..nb {
                    buf[b].re = sino.get(b, v) * cos_w[b];
                }
                self.fft.process(&mut buf);
                for (x, k) in buf.iter_mut().zip(&self.spectrum) {
                    *x = *x * *k;
                }
                self.ifft.process(&mut buf);
                buf[..nb].iter().map(|c| c.re * scale).collect()
            })
            .collect();
        let mut out = vec![T::zero(); nb * nv];
        for (v, col) in columns.into_iter().enumerate() {
            for (b, val) in col.into_iter().enumerate() {
                out[b * nv + v] = val;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, sino: &Sinogram<T>) -> Result<Image<T>> {
        let q = self.filter(sino)?;
        let g = &self.geom;
        let (h, w) = g.image_shape();
        let (nb, nv) = g.sino_shape();
        let (py, px) = g.pixel_size();
        let half = g.fov / 2.0;
        let dbeta = std::f64::consts::TAU / nv as f64;
        let center_bin = (nb as f64 - 1.0) / 2.0;
        let views: Vec<(f64, f64)> = (0..nv).map(|v| {
            let beta = g.view_angle(v);
            (beta.cos(), beta.sin())
        }).collect();
        let rows: Vec<Vec<T>> = (0..h)
            .into_par_iter()
            .map(|i| {
                let y = half - (i as f64 + 0.5) * py;
                (0..w)
                    .map(|j| {
                        let x = (j as f64 + 0.5) * px - half;
                        let mut acc = 0.0;
                        for (v, &(cb, sb)) in views.iter().enumerate() {
                            let (qx, qy) = (x - g.dso * cb, y - g.dso * sb);
                            let (d0x, d0y) = (-cb, -sb);
                            let gamma = (d0x * qy - d0y * qx).atan2(d0x * qx + d0y * qy);
                            let l2 = qx * qx + qy * qy;
                            let fb = gamma / g.det_pitch + center_bin;
                            if fb < 0.0 || fb > (nb - 1) as f64 {
                                continue;
                            }
                            let b0 = (fb.floor() as usize).min(nb - 2);
                            let t = fb - b0 as f64;
                            let val = (1.0 - t) * q[b0 * nv + v].as_f64() + t * q[(b0 + 1) * nv + v].as_f64();
                            acc += val / l2;
                        }
                        T::lit(acc * dbeta)
                    })
                    .collect()
            })
            .collect();
        Image::new(h, w, rows.concat())
    }
}

pub fn fbp<T: Scalar>(sino: &Sinogram<T>, geom: &FanBeamGeometry, window: FbpWindow) -> Result<Image<T>> {
    FbpFilter::new(geom, window)?.apply(sino)
}
