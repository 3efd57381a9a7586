//! Discrete fan-beam projection.
//!
//! Each ray is sampled at uniform steps of at most half a pixel along its chord
//! through the (slightly padded) image square; every sample bilinearly
//! interpolates the image, and contributes its interpolation weights times the
//! step length. The per-ray weight list (duplicates merged, sorted by pixel)
//! therefore defines one row of the system matrix `P`, and back-projection
//! scatters exactly the same weights, making it the literal transpose.

mod fbp;
mod geometry;
mod sinogram;

use rayon::prelude::*;

pub use fbp::{fbp, FbpFilter, FbpWindow};
pub use geometry::FanBeamGeometry;
pub use sinogram::{SinoMask, Sinogram};

use crate::error::{Error, Result};
use crate::imaging::{BinaryImageMask, Image};
use crate::linop::LinearOperator;
use crate::scalar::Scalar;

/// Above this many stored weights the projector recomputes rays on the fly.
const CACHE_LIMIT: usize = 60_000_000;

/// Views are accumulated in groups of this size during back-projection; the
/// grouping does not depend on the thread count, so results are reproducible.
const VIEW_CHUNK: usize = 8;

/// Merged `(pixel index, weight)` list of a single ray.
pub fn ray_weights(geom: &FanBeamGeometry, view: usize, bin: usize, out: &mut Vec<(u32, f64)>) {
    out.clear();
    let (h, w) = geom.image_shape();
    let (py, px) = geom.pixel_size();
    let half = geom.fov / 2.0;
    let reach = half + 0.5 * px.max(py);
    let (src, dir) = geom.ray(view, bin);

    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    for axis in 0..2 {
        if dir[axis].abs() < 1e-15 {
            if src[axis].abs() > reach {
                return;
            }
            continue;
        }
        let t1 = (-reach - src[axis]) / dir[axis];
        let t2 = (reach - src[axis]) / dir[axis];
        t_in = t_in.max(t1.min(t2));
        t_out = t_out.min(t1.max(t2));
    }
    if !(t_out > t_in) {
        return;
    }
    let len = t_out - t_in;
    let max_step = 0.5 * px.min(py);
    let steps = (len / max_step).ceil().max(1.0) as usize;
    let dt = len / steps as f64;

    for m in 0..steps {
        let t = t_in + (m as f64 + 0.5) * dt;
        let x = src[0] + t * dir[0];
        let y = src[1] + t * dir[1];
        let fj = (x + half) / px - 0.5;
        let fi = (half - y) / py - 0.5;
        let (i0, j0) = (fi.floor(), fj.floor());
        let (di, dj) = (fi - i0, fj - j0);
        let (i0, j0) = (i0 as i64, j0 as i64);
        let corners = [
            (i0, j0, (1.0 - di) * (1.0 - dj)),
            (i0, j0 + 1, (1.0 - di) * dj),
            (i0 + 1, j0, di * (1.0 - dj)),
            (i0 + 1, j0 + 1, di * dj),
        ];
        for (i, j, wt) in corners {
            if wt > 0.0 && i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                out.push(((i as usize * w + j as usize) as u32, wt * dt));
            }
        }
    }
    out.sort_by_key(|e| e.0);
    let mut merged = 0;
    for k in 0..out.len() {
        if merged > 0 && out[merged - 1].0 == out[k].0 {
            out[merged - 1].1 += out[k].1;
        } else {
            out[merged] = out[k];
            merged += 1;
        }
    }
    out.truncate(merged);
}

/// Sparse rows ordered view-major: row `v * n_bins + b`.
#[derive(Debug, Clone)]
struct RayMatrix<T> {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<T>,
}

impl<T: Scalar> RayMatrix<T> {
    fn build(geom: &FanBeamGeometry) -> Self {
        let per_view: Vec<(Vec<usize>, Vec<u32>, Vec<T>)> = (0..geom.n_views)
            .into_par_iter()
            .map(|v| {
                let mut buf = Vec::new();
                let mut lens = Vec::with_capacity(geom.n_bins);
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                for b in 0..geom.n_bins {
                    ray_weights(geom, v, b, &mut buf);
                    lens.push(buf.len());
                    cols.extend(buf.iter().map(|e| e.0));
                    vals.extend(buf.iter().map(|e| T::lit(e.1)));
                }
                (lens, cols, vals)
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(geom.n_views * geom.n_bins + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (lens, c, w) in per_view {
            for l in lens {
                row_ptr.push(row_ptr.last().unwrap() + l);
            }
            cols.extend(c);
            vals.extend(w);
        }
        Self { row_ptr, cols, vals }
    }
}

fn estimated_weights(geom: &FanBeamGeometry) -> usize {
    let side = geom.image_height.max(geom.image_width);
    geom.n_views * geom.n_bins * side * 4
}

/// Fan-beam projector `P` with its exact adjoint `Pᵀ`.
#[derive(Debug, Clone)]
pub struct FanBeamProjector<T> {
    geom: FanBeamGeometry,
    matrix: Option<RayMatrix<T>>,
}

impl<T: Scalar> FanBeamProjector<T> {
    pub fn new(geom: &FanBeamGeometry) -> Result<Self> {
        geom.validate()?;
        let matrix = (estimated_weights(geom) <= CACHE_LIMIT).then(|| RayMatrix::build(geom));
        Ok(Self {
            geom: geom.clone(),
            matrix,
        })
    }

    /// Projector that never caches the system matrix.
    pub fn uncached(geom: &FanBeamGeometry) -> Result<Self> {
        geom.validate()?;
        Ok(Self {
            geom: geom.clone(),
            matrix: None,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geom
    }

    /// Merged weights of one ray, as used by both projection directions.
    pub fn ray_pixels(&self, view: usize, bin: usize) -> Vec<(usize, T)> {
        if let Some(m) = &self.matrix {
            let r = view * self.geom.n_bins + bin;
            let span = m.row_ptr[r]..m.row_ptr[r + 1];
            m.cols[span.clone()]
                .iter()
                .zip(&m.vals[span])
                .map(|(&c, &v)| (c as usize, v))
                .collect()
        } else {
            let mut buf = Vec::new();
            ray_weights(&self.geom, view, bin, &mut buf);
            buf.iter().map(|&(c, v)| (c as usize, T::lit(v))).collect()
        }
    }

    fn with_view_rows<R>(&self, view: usize, mut f: impl FnMut(usize, &[u32], &[T]) -> R) -> Vec<R> {
        let nb = self.geom.n_bins;
        match &self.matrix {
            Some(m) => (0..nb)
                .map(|b| {
                    let r = view * nb + b;
                    let span = m.row_ptr[r]..m.row_ptr[r + 1];
                    f(b, &m.cols[span.clone()], &m.vals[span])
                })
                .collect(),
            None => {
                let mut buf = Vec::new();
                (0..nb)
                    .map(|b| {
                        ray_weights(&self.geom, view, b, &mut buf);
                        let cols: Vec<u32> = buf.iter().map(|e| e.0).collect();
                        let vals: Vec<T> = buf.iter().map(|e| T::lit(e.1)).collect();
                        f(b, &cols, &vals)
                    })
                    .collect()
            }
        }
    }

    /// `P x` on a flat row-major image; output is a flat `n_bins × n_views` array.
    pub fn forward_flat(&self, x: &[T]) -> Vec<T> {
        let (nb, nv) = self.geom.sino_shape();
        let columns: Vec<Vec<T>> = (0..nv)
            .into_par_iter()
            .map(|v| {
                self.with_view_rows(v, |_, cols, vals| {
                    let mut acc = T::zero();
                    for (&c, &w) in cols.iter().zip(vals) {
                        acc += w * x[c as usize];
                    }
                    acc
                })
            })
            .collect();
        let mut out = vec![T::zero(); nb * nv];
        for (v, col) in columns.into_iter().enumerate() {
            for (b, val) in col.into_iter().enumerate() {
                out[b * nv + v] = val;
            }
        }
        out
    }

    /// `Pᵀ y` on a flat sinogram; output is a flat row-major image.
    pub fn back_flat(&self, y: &[T]) -> Vec<T> {
        let (nb, nv) = self.geom.sino_shape();
        let npix = self.geom.image_height * self.geom.image_width;
        let chunks: Vec<Vec<T>> = (0..nv.div_ceil(VIEW_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut acc = vec![T::zero(); npix];
                for v in chunk * VIEW_CHUNK..((chunk + 1) * VIEW_CHUNK).min(nv) {
                    self.with_view_rows(v, |b, cols, vals| {
                        let yv = y[b * nv + v];
                        if yv != T::zero() {
                            for (&c, &w) in cols.iter().zip(vals) {
                                acc[c as usize] += w * yv;
                            }
                        }
                    });
                }
                acc
            })
            .collect();
        let mut out = vec![T::zero(); npix];
        for buf in chunks {
            for (o, v) in out.iter_mut().zip(buf) {
                *o += v;
            }
        }
        debug_assert_eq!(nb * nv, y.len());
        out
    }

    pub fn forward(&self, img: &Image<T>) -> Result<Sinogram<T>> {
        if img.shape() != self.geom.image_shape() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs geometry {:?}",
                img.shape(),
                self.geom.image_shape()
            )));
        }
        Sinogram::new(self.geom.n_bins, self.geom.n_views, self.forward_flat(img.data()))
    }

    pub fn back(&self, sino: &Sinogram<T>) -> Result<Image<T>> {
        sino.check_geometry(&self.geom)?;
        Image::new(self.geom.image_height, self.geom.image_width, self.back_flat(sino.data()))
    }
}

impl<T: Scalar> LinearOperator<T> for FanBeamProjector<T> {
    fn domain_shape(&self) -> [usize; 3] {
        [1, self.geom.image_height, self.geom.image_width]
    }

    fn range_shape(&self) -> [usize; 3] {
        [1, self.geom.n_bins, self.geom.n_views]
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        self.forward_flat(x)
    }

    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.back_flat(y)
    }

    fn name(&self) -> &str {
        "fan-beam projector"
    }
}

pub fn forward_project<T: Scalar>(img: &Image<T>, geom: &FanBeamGeometry) -> Result<Sinogram<T>> {
    FanBeamProjector::new(geom)?.forward(img)
}

pub fn back_project<T: Scalar>(sino: &Sinogram<T>, geom: &FanBeamGeometry) -> Result<Image<T>> {
    FanBeamProjector::new(geom)?.back(sino)
}

/// Rays whose projection of the mask exceeds `eps`.
pub fn metal_trace<T: Scalar>(mask: &BinaryImageMask, projector: &FanBeamProjector<T>, eps: f64) -> Result<SinoMask> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("trace threshold {eps} must be positive")));
    }
    let sino = projector.forward(&mask.to_image::<T>())?;
    let data = sino.data().iter().map(|v| v.as_f64() > eps).collect();
    SinoMask::new(sino.n_bins(), sino.n_views(), data)
}

/// Power-iteration estimate of `‖PᵀP‖₂`, started from the all-ones image.
///
/// For a positive semi-definite operator the iterates `‖A x_k‖` with
/// normalized `x_k` never decrease, so more iterations never lower the estimate.
pub fn operator_norm_estimate<T: Scalar>(projector: &FanBeamProjector<T>, iters: usize) -> Result<f64> {
    if iters < 10 {
        return Err(Error::InvalidParameter(format!("power iteration needs ≥ 10 steps, got {iters}")));
    }
    let n = projector.geom.image_height * projector.geom.image_width;
    let mut x = vec![T::lit(1.0 / (n as f64).sqrt()); n];
    let mut est = 0.0;
    for _ in 0..iters {
        let y = projector.back_flat(&projector.forward_flat(&x));
        let norm = crate::scalar::norm2(&y);
        if norm == 0.0 {
            return Ok(0.0);
        }
        est = norm;
        let inv = T::lit(1.0 / norm);
        x = y.into_iter().map(|v| v * inv).collect();
    }
    Ok(est)
}

#[cfg(test)]
mod tests;
