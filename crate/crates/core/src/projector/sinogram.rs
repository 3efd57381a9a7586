use crate::error::{Error, Result};
use crate::projector::FanBeamGeometry;
use crate::scalar::Scalar;

/// Line-integral data, `n_bins × n_views`, row-major (`data[b * n_views + v]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<T> {
    n_bins: usize,
    n_views: usize,
    data: Vec<T>,
}

impl<T: Scalar> Sinogram<T> {
    pub fn new(n_bins: usize, n_views: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n_bins * n_views {
            return Err(Error::ShapeMismatch(format!(
                "{n_bins}x{n_views} sinogram needs {} values, got {}",
                n_bins * n_views,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sinogram entry {k}")));
        }
        Ok(Self { n_bins, n_views, data })
    }

    pub fn zeros(n_bins: usize, n_views: usize) -> Self {
        Self {
            n_bins,
            n_views,
            data: vec![T::zero(); n_bins * n_views],
        }
    }

    pub fn zeros_for(geom: &FanBeamGeometry) -> Self {
        Self::zeros(geom.n_bins, geom.n_views)
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_bins, self.n_views)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, bin: usize, view: usize) -> T {
        self.data[bin * self.n_views + view]
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn check_geometry(&self, geom: &FanBeamGeometry) -> Result<()> {
        if self.shape() != geom.sino_shape() {
            return Err(Error::ShapeMismatch(format!(
                "sinogram {:?} vs geometry {:?}",
                self.shape(),
                geom.sino_shape()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Sinogram<U> {
        Sinogram {
            n_bins: self.n_bins,
            n_views: self.n_views,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Binary sinogram-domain mask (metal trace or missing-view mask), same layout
/// as [`Sinogram`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinoMask {
    n_bins: usize,
    n_views: usize,
    data: Vec<bool>,
}

impl SinoMask {
    pub fn new(n_bins: usize, n_views: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != n_bins * n_views {
            return Err(Error::ShapeMismatch(format!(
                "{n_bins}x{n_views} mask needs {} values, got {}",
                n_bins * n_views,
                data.len()
            )));
        }
        Ok(Self { n_bins, n_views, data })
    }

    pub fn empty(n_bins: usize, n_views: usize) -> Self {
        Self {
            n_bins,
            n_views,
            data: vec![false; n_bins * n_views],
        }
    }

    pub fn from_sinogram<T: Scalar>(s: &Sinogram<T>) -> Result<Self> {
        let mut data = Vec::with_capacity(s.data.len());
        for (k, &v) in s.data.iter().enumerate() {
            if v == T::zero() {
                data.push(false);
            } else if v == T::one() {
                data.push(true);
            } else {
                return Err(Error::InvalidParameter(format!("mask entry {k} is {v}")));
            }
        }
        Self::new(s.n_bins, s.n_views, data)
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_bins, self.n_views)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, bin: usize, view: usize) -> bool {
        self.data[bin * self.n_views + view]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mask union {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            n_bins: self.n_bins,
            n_views: self.n_views,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            n_bins: self.n_bins,
            n_views: self.n_views,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_sinogram<T: Scalar>(&self) -> Sinogram<T> {
        Sinogram {
            n_bins: self.n_bins,
            n_views: self.n_views,
            data: self
                .data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }
}
