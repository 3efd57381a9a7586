//! Grid types, phantoms, metal masks and image rotation.
//!
//! Images are stored row-major: pixel `(i, j)` (row `i` from the top, column
//! `j` from the left) lives at `data[i * width + j]`. Its center sits at the
//! physical coordinates
//!
//! ```text
//! x = ((j + 0.5) / W - 0.5) * fov
//! y = (0.5 - (i + 0.5) / H) * fov
//! ```
//!
//! so `y` points up. Phantom ellipses are given in the normalized square
//! `[-1, 1]²`, i.e. physical coordinates divided by `fov / 2`.

use crate::error::{Error, Result};
use crate::scalar::{snapped_cos_sin, Scalar};

pub const MIN_IMAGE_SIDE: usize = 8;

/// Clipping range applied to rendered phantoms.
pub const PHANTOM_MAX: f64 = 1.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_side(height, width)?;
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image pixel {k}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![T::zero(); height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut f = f;
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Element-wise map; fails if the result is not finite.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

fn check_side(height: usize, width: usize) -> Result<()> {
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(Error::ShapeMismatch(format!(
            "image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
        )));
    }
    Ok(())
}

/// Binary image-domain support, e.g. of a metal implant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImageMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryImageMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_side(height, width)?;
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    /// Reads a 0/1 image; anything other than exactly 0 or 1 is rejected.
    pub fn from_image<T: Scalar>(img: &Image<T>) -> Result<Self> {
        let mut data = Vec::with_capacity(img.data.len());
        for (k, &v) in img.data.iter().enumerate() {
            if v == T::zero() {
                data.push(false);
            } else if v == T::one() {
                data.push(true);
            } else {
                return Err(Error::InvalidParameter(format!(
                    "mask pixel {k} is {v}, expected 0 or 1"
                )));
            }
        }
        Self::new(img.height, img.width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_image<T: Scalar>(&self) -> Image<T> {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch("mask union".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Self::new(self.height, self.width, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the ellipse's own x direction.
    pub a: f64,
    pub b: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (dx, dy) = (x - self.cx, y - self.cy);
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    /// The ten-ellipse modified Shepp–Logan head phantom (intensities in [0, 1]).
    pub fn shepp_logan() -> Self {
        let d = f64::to_radians;
        let e = |cx, cy, a, b, angle, intensity| Ellipse {
            cx,
            cy,
            a,
            b,
            angle,
            intensity,
        };
        Self {
            ellipses: vec![
                e(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
                e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
                e(0.22, 0.0, 0.11, 0.31, d(-18.0), -0.2),
                e(-0.22, 0.0, 0.16, 0.41, d(18.0), -0.2),
                e(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
                e(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
                e(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
                e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
                e(0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
                e(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
            ],
        }
    }

    pub fn disk(radius: f64, intensity: f64) -> Self {
        Self {
            ellipses: vec![Ellipse {
                cx: 0.0,
                cy: 0.0,
                a: radius,
                b: radius,
                angle: 0.0,
                intensity,
            }],
        }
    }

    /// A randomized head-like phantom: skull, brain, and a handful of inserts.
    /// Everything stays inside the disk of radius 0.95.
    pub fn random_head<R: rand::Rng>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let outer_a = u(0.62, 0.78);
        let outer_b = u(0.72, 0.90);
        let tilt = u(-0.3, 0.3);
        let skull = u(0.04, 0.07);
        let mut ellipses = vec![
            Ellipse {
                cx: 0.0,
                cy: 0.0,
                a: outer_a,
                b: outer_b,
                angle: tilt,
                intensity: u(0.85, 1.0),
            },
            Ellipse {
                cx: 0.0,
                cy: 0.0,
                a: outer_a - skull,
                b: outer_b - skull,
                angle: tilt,
                intensity: -u(0.55, 0.7),
            },
        ];
        let inner = (outer_a - skull).min(outer_b - skull);
        let n = 3 + (u(0.0, 1.0) * 5.0) as usize;
        for _ in 0..n {
            let r = u(0.0, 0.6) * inner;
            let phi = u(0.0, std::f64::consts::TAU);
            let size = u(0.04, 0.22) * inner;
            ellipses.push(Ellipse {
                cx: r * phi.cos(),
                cy: r * phi.sin(),
                a: size * u(0.5, 1.0),
                b: size * u(0.5, 1.0),
                angle: u(0.0, std::f64::consts::PI),
                intensity: u(-0.15, 0.35),
            });
        }
        Self { ellipses }
    }
}

/// Normalized `[-1, 1]²` coordinates of the center of pixel `(i, j)`.
#[inline]
pub fn normalized_center(i: usize, j: usize, height: usize, width: usize) -> (f64, f64) {
    (
        2.0 * ((j as f64 + 0.5) / width as f64 - 0.5),
        2.0 * (0.5 - (i as f64 + 0.5) / height as f64),
    )
}

/// Pixel value = sum of intensities of ellipses containing the pixel center,
/// clipped to `[0, PHANTOM_MAX]`.
pub fn render_phantom<T: Scalar>(spec: &PhantomSpec, height: usize, width: usize) -> Result<Image<T>> {
    if spec.ellipses.is_empty() {
        return Err(Error::InvalidSpec("phantom has no ellipses".into()));
    }
    if let Some(e) = spec.ellipses.iter().find(|e| !(e.a > 0.0 && e.b > 0.0)) {
        return Err(Error::InvalidSpec(format!("non-positive semi-axis in {e:?}")));
    }
    check_side(height, width)?;
    Image::from_fn(height, width, |i, j| {
        let (x, y) = normalized_center(i, j, height, width);
        let v: f64 = spec
            .ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        T::lit(v.clamp(0.0, PHANTOM_MAX))
    })
}

/// A metal implant described by the exact number of pixels it covers.
///
/// The mask consists of the `pixels` pixel centers closest to `(cx, cy)` under
/// an elliptical metric (semi-axis ratio `aspect`, rotated by `angle`), with
/// ties broken by raster order.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetalSpec {
    pub cx: f64,
    pub cy: f64,
    pub pixels: usize,
    pub aspect: f64,
    pub angle: f64,
}

impl MetalSpec {
    pub fn disk(cx: f64, cy: f64, pixels: usize) -> Self {
        Self {
            cx,
            cy,
            pixels,
            aspect: 1.0,
            angle: 0.0,
        }
    }

    pub fn render(&self, height: usize, width: usize) -> Result<BinaryImageMask> {
        if self.pixels > height * width {
            return Err(Error::InvalidSpec(format!(
                "metal of {} pixels does not fit a {height}x{width} image",
                self.pixels
            )));
        }
        if !(self.aspect > 0.0) {
            return Err(Error::InvalidSpec("metal aspect must be positive".into()));
        }
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let mut ranked: Vec<(f64, usize)> = (0..height * width)
            .map(|k| {
                let (x, y) = normalized_center(k / width, k % width, height, width);
                let (dx, dy) = (x - self.cx, y - self.cy);
                let xr = dx * c + dy * s;
                let yr = (-dx * s + dy * c) / self.aspect;
                (xr * xr + yr * yr, k)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut data = vec![false; height * width];
        for &(_, k) in ranked.iter().take(self.pixels) {
            data[k] = true;
        }
        BinaryImageMask::new(height, width, data)
    }
}

/// Replaces masked pixels by `mu_metal`.
pub fn insert_metal<T: Scalar>(img: &Image<T>, mask: &BinaryImageMask, mu_metal: T) -> Result<Image<T>> {
    if img.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            img.shape(),
            mask.shape()
        )));
    }
    if !mu_metal.is_finite() {
        return Err(Error::NonFinite("mu_metal".into()));
    }
    let data = img
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m { mu_metal } else { v })
        .collect();
    Image::new(img.height, img.width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    #[default]
    Bilinear,
}

/// Rotates a row-major grid by `quarter_turns · 90°` using the same action as
/// [`rotate_image`] (output(x) = input(U⁻¹x)). Requires a square grid when the
/// turn count is odd.
pub fn rotate_grid_quarter<T: Copy>(data: &[T], height: usize, width: usize, quarter_turns: i64) -> Vec<T> {
    let q = quarter_turns.rem_euclid(4);
    if q % 2 == 1 {
        assert_eq!(height, width, "odd quarter turns need a square grid");
    }
    let n = height;
    (0..height * width)
        .map(|k| {
            let (i, j) = (k / width, k % width);
            // source pixel of output (i, j); derived from x' = c·x − s·y, y' = s·x + c·y
            let (si, sj) = match q {
                0 => (i, j),
                1 => (n - 1 - j, i),
                2 => (height - 1 - i, width - 1 - j),
                _ => (j, n - 1 - i),
            };
            data[si * width + sj]
        })
        .collect()
}

/// Rotation about the image center: `output(x) = input(U_θ⁻¹ x)` with
/// `U_θ = [[cos θ, sin θ], [−sin θ, cos θ]]` acting on centered pixel
/// coordinates (x right, y up). Samples falling outside the grid read as zero.
pub fn rotate_image<T: Scalar>(img: &Image<T>, theta: f64, interp: Interp) -> Result<Image<T>> {
    if !theta.is_finite() {
        return Err(Error::NonFinite(format!("rotation angle {theta}")));
    }
    let (h, w) = img.shape();
    let (c, s) = snapped_cos_sin(theta);
    let quarter = match (c as i64, s as i64) {
        _ if c.fract() != 0.0 || s.fract() != 0.0 => None,
        (1, 0) => Some(0),
        (0, 1) => Some(1),
        (-1, 0) => Some(2),
        (0, -1) => Some(3),
        _ => None,
    };
    if let Some(q) = quarter {
        if h == w || q % 2 == 0 {
            return Image::new(h, w, rotate_grid_quarter(&img.data, h, w, q));
        }
    }
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Image::from_fn(h, w, |i, j| {
        let x = j as f64 - cj;
        let y = ci - i as f64;
        let xs = c * x - s * y;
        let ys = s * x + c * y;
        let (fi, fj) = (ci - ys, xs + cj);
        match interp {
            Interp::Nearest => {
                let (ri, rj) = (fi.round(), fj.round());
                if ri >= 0.0 && rj >= 0.0 && (ri as usize) < h && (rj as usize) < w {
                    img.get(ri as usize, rj as usize)
                } else {
                    T::zero()
                }
            }
            Interp::Bilinear => bilinear(img, fi, fj),
        }
    })
}

/// Bilinear sample at fractional (row, column) with zero padding.
#[inline]
pub fn bilinear<T: Scalar>(img: &Image<T>, fi: f64, fj: f64) -> T {
    let (h, w) = img.shape();
    let i0 = fi.floor();
    let j0 = fj.floor();
    let (di, dj) = (fi - i0, fj - j0);
    let (i0, j0) = (i0 as i64, j0 as i64);
    let at = |i: i64, j: i64| -> f64 {
        if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
            img.get(i as usize, j as usize).as_f64()
        } else {
            0.0
        }
    };
    let v = (1.0 - di) * ((1.0 - dj) * at(i0, j0) + dj * at(i0, j0 + 1))
        + di * ((1.0 - dj) * at(i0 + 1, j0) + dj * at(i0 + 1, j0 + 1));
    T::lit(v)
}

/// Centered disk window (1 inside radius `frac · min(H, W) / 2`, else 0).
pub fn disk_window<T: Scalar>(height: usize, width: usize, frac: f64) -> Result<Image<T>> {
    let r = frac * height.min(width) as f64 / 2.0;
    let (ci, cj) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    Image::from_fn(height, width, |i, j| {
        let d = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
        if d <= r {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Isotropic Gaussian blob centered at `(di, dj)` pixels from the image center.
pub fn gaussian_blob<T: Scalar>(height: usize, width: usize, sigma: f64, di: f64, dj: f64) -> Result<Image<T>> {
    let (ci, cj) = ((height as f64 - 1.0) / 2.0 + di, (width as f64 - 1.0) / 2.0 + dj);
    Image::from_fn(height, width, |i, j| {
        let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
        T::lit((-r2 / (2.0 * sigma * sigma)).exp())
    })
}
