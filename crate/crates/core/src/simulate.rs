//! Synthetic sparse-view, metal-affected sinograms and their persistence.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{insert_metal, render_phantom, BinaryImageMask, Image, MetalSpec, PhantomSpec};
use crate::projector::{metal_trace, FanBeamGeometry, FanBeamProjector, SinoMask, Sinogram};
use crate::scalar::Scalar;
use crate::tensor_io::{read_tensor, write_tensor};

/// Rays whose summed weight over the metal exceeds this belong to the trace.
pub const TRACE_EPS: f64 = 1e-12;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Image pixels times views above which a dataset is flagged as slow.
pub const SLOW_WORK: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionParams {
    /// Beam-hardening strength inside the metal trace.
    pub alpha: f64,
    /// Incident photon count; 0 disables noise.
    pub i0: f64,
    pub mu_metal: f64,
    pub seed: u64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            i0: 1e5,
            mu_metal: 2.5,
            seed: 0,
        }
    }
}

impl CorruptionParams {
    pub fn clean() -> Self {
        Self {
            alpha: 0.0,
            i0: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::OutOfRange(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if !(self.i0 >= 0.0) || !self.i0.is_finite() {
            return Err(Error::OutOfRange(format!("I0 {} must be finite and >= 0", self.i0)));
        }
        if !self.mu_metal.is_finite() {
            return Err(Error::NonFinite("mu_metal".into()));
        }
        Ok(())
    }
}

/// Missing-view mask: views with index divisible by `rate` are kept.
pub fn sparse_mask(n_bins: usize, n_views: usize, rate: usize) -> Result<SinoMask> {
    if rate == 0 || n_views % rate != 0 {
        return Err(Error::InvalidParameter(format!(
            "rate must divide views (rate {rate}, views {n_views})"
        )));
    }
    let mut data = vec![false; n_bins * n_views];
    for b in 0..n_bins {
        for v in 0..n_views {
            data[b * n_views + v] = v % rate != 0;
        }
    }
    SinoMask::new(n_bins, n_views, data)
}

fn check_same(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Beam hardening and photon starvation inside the metal trace.
pub fn corrupt_sinogram<T: Scalar>(
    y_clean: &Sinogram<T>,
    metal: &BinaryImageMask,
    projector: &FanBeamProjector<T>,
    params: &CorruptionParams,
) -> Result<(Sinogram<T>, SinoMask)> {
    params.validate()?;
    y_clean.check_geometry(projector.geometry())?;
    let tr = metal_trace(metal, projector, TRACE_EPS)?;
    let ymax = y_clean.max_value().as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out: Vec<T> = y_clean.data().to_vec();
    for (k, v) in out.iter_mut().enumerate() {
        if !tr.data()[k] {
            continue;
        }
        let mut y = v.as_f64();
        if params.alpha > 0.0 && ymax > 0.0 {
            y -= params.alpha * y * y / ymax;
        }
        if params.i0 > 0.0 {
            let mean = params.i0 * (-y).exp();
            let counts = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| Error::InvalidParameter(format!("poisson mean {mean}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            y = -(counts.max(1.0) / params.i0).ln();
        }
        *v = T::lit(y);
    }
    let (nb, nv) = y_clean.shape();
    Ok((Sinogram::new(nb, nv, out)?, tr))
}

/// Zeroes the entries marked missing in `d`.
pub fn apply_view_removal<T: Scalar>(y: &Sinogram<T>, d: &SinoMask) -> Result<Sinogram<T>> {
    check_same(y.shape(), d.shape(), "sinogram vs D")?;
    let data = y
        .data()
        .iter()
        .zip(d.data())
        .map(|(&v, &m)| if m { T::zero() } else { v })
        .collect();
    Sinogram::new(y.n_bins(), y.n_views(), data)
}

/// Linear-interpolation inpainting of every entry with `Tr ∪ D = 1`.
///
/// Metal-trace entries of measured views are bridged along the detector axis,
/// then missing views are bridged along the (circular) view axis.
pub fn linear_interp_fill<T: Scalar>(y: &Sinogram<T>, tr: &SinoMask, d: &SinoMask) -> Result<Sinogram<T>> {
    check_same(y.shape(), tr.shape(), "sinogram vs Tr")?;
    check_same(y.shape(), d.shape(), "sinogram vs D")?;
    let (nb, nv) = y.shape();
    let mut out = y.data().to_vec();
    let idx = |b: usize, v: usize| b * nv + v;

    for v in 0..nv {
        let measured: Vec<usize> = (0..nb).filter(|&b| !d.get(b, v)).collect();
        if !measured.iter().any(|&b| tr.get(b, v)) {
            continue;
        }
        let trusted: Vec<usize> = measured.iter().copied().filter(|&b| !tr.get(b, v)).collect();
        if trusted.is_empty() {
            return Err(Error::Fill(format!("view {v} has no trusted detector bin")));
        }
        for &b in measured.iter().filter(|&&b| tr.get(b, v)) {
            let pos = trusted.partition_point(|&t| t < b);
            let value = match (pos.checked_sub(1).map(|p| trusted[p]), trusted.get(pos)) {
                (Some(lo), Some(&hi)) => {
                    let (y0, y1) = (out[idx(lo, v)], out[idx(hi, v)]);
                    let t = T::from_usize_lossy(b - lo) / T::from_usize_lossy(hi - lo);
                    y0 + (y1 - y0) * t
                }
                (Some(lo), None) => out[idx(lo, v)],
                (None, Some(&hi)) => out[idx(hi, v)],
                (None, None) => unreachable!(),
            };
            out[idx(b, v)] = value;
        }
    }

    for b in 0..nb {
        let kept: Vec<usize> = (0..nv).filter(|&v| !d.get(b, v)).collect();
        if kept.len() == nv {
            continue;
        }
        if kept.is_empty() {
            return Err(Error::Fill(format!("bin {b} has no measured view")));
        }
        for v in (0..nv).filter(|&v| d.get(b, v)) {
            let pos = kept.partition_point(|&k| k < v);
            let prev = if pos == 0 { kept[kept.len() - 1] } else { kept[pos - 1] };
            let next = if pos == kept.len() { kept[0] } else { kept[pos] };
            let d0 = (v + nv - prev) % nv;
            let d1 = (next + nv - v) % nv;
            let (y0, y1) = (out[idx(b, prev)], out[idx(b, next)]);
            let t = T::from_usize_lossy(d0) / T::from_usize_lossy(d0 + d1);
            out[idx(b, v)] = y0 + (y1 - y0) * t;
        }
    }
    Sinogram::new(nb, nv, out)
}

/// One paired training or test sample.
#[derive(Debug, Clone)]
pub struct SampleRecord<T> {
    pub x_gt: Image<T>,
    pub metal: BinaryImageMask,
    pub y_gt: Sinogram<T>,
    pub y_svma: Sinogram<T>,
    pub tr: SinoMask,
    pub d: SinoMask,
    pub geometry: FanBeamGeometry,
}

impl<T: Scalar> SampleRecord<T> {
    pub fn metal_px(&self) -> usize {
        self.metal.count()
    }

    pub fn cast<U: Scalar>(&self) -> SampleRecord<U> {
        SampleRecord {
            x_gt: self.x_gt.cast(),
            metal: self.metal.clone(),
            y_gt: self.y_gt.cast(),
            y_svma: self.y_svma.cast(),
            tr: self.tr.clone(),
            d: self.d.clone(),
            geometry: self.geometry.clone(),
        }
    }
}

/// Builds a record from a ground-truth image and a metal mask.
pub fn synthesize<T: Scalar>(
    x_gt: &Image<T>,
    metal: &BinaryImageMask,
    projector: &FanBeamProjector<T>,
    params: &CorruptionParams,
    d: &SinoMask,
) -> Result<SampleRecord<T>> {
    let geom = projector.geometry();
    let with_metal = insert_metal(x_gt, metal, T::lit(params.mu_metal))?;
    let y_gt = projector.forward(x_gt)?;
    let y_clean = projector.forward(&with_metal)?;
    let (corrupted, tr) = corrupt_sinogram(&y_clean, metal, projector, params)?;
    let y_svma = apply_view_removal(&corrupted, d)?;
    Ok(SampleRecord {
        x_gt: x_gt.clone(),
        metal: metal.clone(),
        y_gt,
        y_svma,
        tr,
        d: d.clone(),
        geometry: geom.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFiles {
    pub x_gt: String,
    pub metal: String,
    pub y_gt: String,
    pub y_svma: String,
    pub tr: String,
    pub d: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub phantom: usize,
    pub metal: usize,
    pub seed: u64,
    pub metal_px: usize,
    pub files: RecordFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub geometry: FanBeamGeometry,
    pub corruption: CorruptionParams,
    pub rate: usize,
    pub seed: u64,
    pub slow: bool,
    pub geometry_hash: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub records: Vec<RecordEntry>,
}

/// Validates a dataset request and lays out its manifest without computing anything.
pub fn plan_dataset(
    phantoms: &[PhantomSpec],
    metals: &[MetalSpec],
    geom: &FanBeamGeometry,
    params: &CorruptionParams,
    rate: usize,
) -> Result<DatasetManifest> {
    if phantoms.is_empty() || metals.is_empty() {
        return Err(Error::InvalidSpec("need at least one phantom and one metal spec".into()));
    }
    geom.validate()?;
    params.validate()?;
    sparse_mask(1, geom.n_views, rate)?;
    let (h, w) = geom.image_shape();
    let mut records = Vec::with_capacity(phantoms.len() * metals.len());
    for (pi, ph) in phantoms.iter().enumerate() {
        if ph.ellipses.is_empty() {
            return Err(Error::InvalidSpec(format!("phantom {pi} has no ellipses")));
        }
        for (mi, m) in metals.iter().enumerate() {
            if m.pixels > h * w || !(m.aspect > 0.0) {
                return Err(Error::InvalidSpec(format!("metal {mi} does not fit a {h}x{w} image")));
            }
            let index = records.len();
            let id = format!("rec_{index:04}");
            let file = |name: &str| format!("{id}/{name}.ctt");
            records.push(RecordEntry {
                phantom: pi,
                metal: mi,
                seed: params.seed.wrapping_add(index as u64),
                metal_px: m.pixels,
                files: RecordFiles {
                    x_gt: file("x_gt"),
                    metal: file("metal"),
                    y_gt: file("y_gt"),
                    y_svma: file("y_svma"),
                    tr: file("tr"),
                    d: file("d"),
                },
                id,
            });
        }
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        geometry: geom.clone(),
        corruption: *params,
        rate,
        seed: params.seed,
        slow: h * w * geom.n_views > SLOW_WORK,
        geometry_hash: geom.digest(),
        config_hash: None,
        records,
    })
}

fn write_record<T: Scalar>(dir: &Path, files: &RecordFiles, rec: &SampleRecord<T>) -> Result<()> {
    let (h, w) = rec.x_gt.shape();
    let (nb, nv) = rec.y_gt.shape();
    let img = [h, w];
    let sino = [nb, nv];
    write_tensor(&dir.join(&files.x_gt), &img, rec.x_gt.data())?;
    write_tensor(&dir.join(&files.metal), &img, rec.metal.to_image::<T>().data())?;
    write_tensor(&dir.join(&files.y_gt), &sino, rec.y_gt.data())?;
    write_tensor(&dir.join(&files.y_svma), &sino, rec.y_svma.data())?;
    write_tensor(&dir.join(&files.tr), &sino, rec.tr.to_sinogram::<T>().data())?;
    write_tensor(&dir.join(&files.d), &sino, rec.d.to_sinogram::<T>().data())?;
    Ok(())
}

/// Writes the Cartesian product of phantoms and metals as a dataset; returns the record count.
#[allow(clippy::too_many_arguments)]
pub fn make_dataset(
    phantoms: &[PhantomSpec],
    metals: &[MetalSpec],
    geom: &FanBeamGeometry,
    params: &CorruptionParams,
    rate: usize,
    out: &Path,
    config_hash: Option<String>,
) -> Result<usize> {
    let mut manifest = plan_dataset(phantoms, metals, geom, params, rate)?;
    manifest.config_hash = config_hash;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let projector = FanBeamProjector::<f64>::new(geom)?;
    let d = sparse_mask(geom.n_bins, geom.n_views, rate)?;
    let (h, w) = geom.image_shape();
    manifest.records.par_iter().try_for_each(|entry| -> Result<()> {
        let rec_dir = out.join(&entry.id);
        fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        let x_gt = render_phantom::<f64>(&phantoms[entry.phantom], h, w)?;
        let metal = metals[entry.metal].render(h, w)?;
        let rec_params = CorruptionParams {
            seed: entry.seed,
            ..*params
        };
        let rec = synthesize(&x_gt, &metal, &projector, &rec_params, &d)?;
        write_record(out, &entry.files, &rec)
    })?;
    let path = out.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest.records.len())
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("unsupported manifest version {}", manifest.version),
            });
        }
        manifest.geometry.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.manifest.records.iter().position(|r| r.id == id)
    }

    /// Opens the dataset holding the record directory `dir`; returns it with the record index.
    pub fn open_record(dir: &Path) -> Result<(Self, usize)> {
        let bad = || Error::InvalidSpec(format!("{} is not a record directory of a dataset", dir.display()));
        let id = dir.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
        let root = dir.parent().ok_or_else(bad)?;
        let root = if root.as_os_str().is_empty() { Path::new(".") } else { root };
        let ds = Self::open(root)?;
        let index = ds.index_of(id).ok_or_else(bad)?;
        Ok((ds, index))
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.manifest.geometry
    }

    pub fn load<T: Scalar>(&self, index: usize) -> Result<SampleRecord<T>> {
        let entry = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| Error::OutOfRange(format!("record {index} of {}", self.len())))?;
        let geom = &self.manifest.geometry;
        let (h, w) = geom.image_shape();
        let (nb, nv) = (geom.n_bins, geom.n_views);
        let load = |name: &str, shape: [usize; 2]| -> Result<Vec<T>> {
            let path = self.root.join(name);
            let t = read_tensor::<T>(&path)?;
            if t.shape != shape {
                return Err(Error::Format {
                    path,
                    msg: format!("shape {:?}, expected {shape:?}", t.shape),
                });
            }
            Ok(t.data)
        };
        let f = &entry.files;
        let x_gt = Image::new(h, w, load(&f.x_gt, [h, w])?)?;
        let metal = BinaryImageMask::from_image(&Image::new(h, w, load(&f.metal, [h, w])?)?)?;
        let y_gt = Sinogram::new(nb, nv, load(&f.y_gt, [nb, nv])?)?;
        let y_svma = Sinogram::new(nb, nv, load(&f.y_svma, [nb, nv])?)?;
        let tr = SinoMask::from_sinogram(&Sinogram::new(nb, nv, load(&f.tr, [nb, nv])?)?)?;
        let d = SinoMask::from_sinogram(&Sinogram::new(nb, nv, load(&f.d, [nb, nv])?)?)?;
        Ok(SampleRecord {
            x_gt,
            metal,
            y_gt,
            y_svma,
            tr,
            d,
            geometry: geom.clone(),
        })
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Vec<SampleRecord<T>>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests;
