//! 8-bit grayscale previews.

use std::path::Path;

use anyhow::{Context, Result};
use ctrecon::imaging::Image;
use image::{GrayImage, Luma};

/// Display window `(min, max)` of a reference image.
pub fn window(reference: &Image<f64>) -> (f64, f64) {
    reference.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Maps `value` linearly so that the window spans 0..=255, clamping outside it.
pub fn to_u8(value: f64, (lo, hi): (f64, f64)) -> u8 {
    if !(hi > lo) {
        return 0;
    }
    ((value - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write(path: &Path, img: &Image<f64>, win: (f64, f64)) -> Result<()> {
    let (h, w) = img.shape();
    let mut out = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(j as u32, i as u32, Luma([to_u8(img.get(i, j), win)]));
        }
    }
    out.save(path).with_context(|| format!("writing {}", path.display()))
}
