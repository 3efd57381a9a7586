use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equiangular fan-beam geometry over a full circle of source positions.
///
/// View `v` places the source at angle `β_v = 2πv / n_views` on the circle of
/// radius `dso` around the isocenter, i.e. at `dso · (cos β, sin β)`. Detector
/// bin `b` measures the ray leaving the source at fan angle
/// `γ_b = (b − (n_bins − 1)/2) · det_pitch`, measured counter-clockwise from
/// the central ray (which points at the isocenter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub n_views: usize,
    pub n_bins: usize,
    /// Source-to-isocenter distance.
    pub dso: f64,
    /// Source-to-detector distance.
    pub dsd: f64,
    /// Angular pitch of the equiangular detector, radians per bin.
    pub det_pitch: f64,
    /// Side length of the square image field of view.
    pub fov: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl FanBeamGeometry {
    pub const DEFAULT_FOV: f64 = 2.0;

    /// Standard geometry: `n_bins = round(1.5·max(H, W))`, `dso = 1.5·fov`,
    /// `dsd = 3·fov`, and a fan covering the inscribed circle with 5% margin.
    pub fn standard(image_height: usize, image_width: usize, n_views: usize) -> Result<Self> {
        let n_bins = (1.5 * image_height.max(image_width) as f64).round() as usize;
        Self::with_bins(image_height, image_width, n_views, n_bins)
    }

    pub fn with_bins(image_height: usize, image_width: usize, n_views: usize, n_bins: usize) -> Result<Self> {
        Self::scaled(image_height, image_width, n_views, n_bins, Self::DEFAULT_FOV)
    }

    /// Standard geometry with every physical length proportional to `fov`.
    pub fn scaled(image_height: usize, image_width: usize, n_views: usize, n_bins: usize, fov: f64) -> Result<Self> {
        let dso = 1.5 * fov;
        let half_fan = 1.05 * ((fov / 2.0) / dso).asin();
        let g = Self {
            n_views,
            n_bins,
            dso,
            dsd: 3.0 * fov,
            det_pitch: if n_bins > 0 { 2.0 * half_fan / n_bins as f64 } else { 0.0 },
            fov,
            image_height,
            image_width,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGeometry(m));
        if self.n_views == 0 || self.n_bins == 0 {
            return bad(format!("need at least one view and bin, got {}x{}", self.n_bins, self.n_views));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("empty image grid".into());
        }
        if !(self.fov > 0.0 && self.fov.is_finite()) {
            return bad(format!("fov {} must be positive", self.fov));
        }
        if !(self.dso > self.fov / std::f64::consts::SQRT_2) {
            return bad(format!("source distance {} lies inside the image support", self.dso));
        }
        if !(self.dsd > self.dso && self.dsd.is_finite()) {
            return bad(format!("dsd {} must exceed dso {}", self.dsd, self.dso));
        }
        let half_fan = 0.5 * self.det_pitch * self.n_bins as f64;
        if !(self.det_pitch > 0.0) || half_fan >= std::f64::consts::FRAC_PI_2 {
            return bad(format!("detector pitch {} gives an invalid fan", self.det_pitch));
        }
        Ok(())
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        std::f64::consts::TAU * view as f64 / self.n_views as f64
    }

    pub fn bin_angle(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.det_pitch
    }

    /// Source position and unit direction of ray `(view, bin)`.
    pub fn ray(&self, view: usize, bin: usize) -> ([f64; 2], [f64; 2]) {
        let beta = self.view_angle(view);
        let (cb, sb) = (beta.cos(), beta.sin());
        let src = [self.dso * cb, self.dso * sb];
        let (cg, sg) = {
            let g = self.bin_angle(bin);
            (g.cos(), g.sin())
        };
        let d0 = [-cb, -sb];
        let dir = [cg * d0[0] - sg * d0[1], sg * d0[0] + cg * d0[1]];
        (src, dir)
    }

    pub fn pixel_size(&self) -> (f64, f64) {
        (
            self.fov / self.image_height as f64,
            self.fov / self.image_width as f64,
        )
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    pub fn sino_shape(&self) -> (usize, usize) {
        (self.n_bins, self.n_views)
    }

    /// Short stable digest of the geometry, used to match datasets and checkpoints.
    pub fn digest(&self) -> String {
        crate::config::digest_json(self)
    }
}
