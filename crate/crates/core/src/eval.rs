//! Scoring reconstructions against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryImageMask, Image};
use crate::metrics::{psnr, ssim};
use crate::nn::{CheckpointManifest, ParamStore};
use crate::simulate::Dataset;
use crate::solver::{ProxKind, SolverConfig, SolverContext, SolverState, Unrolled};
use crate::train::{load_checkpoint, prepare_dataset, Prepared};

pub const EVAL_HEADER: &str = "sample,rate,metal_px,psnr,ssim";
pub const PEAK: f64 = 1.0;

/// Metal size classes by the fraction of image pixels covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetalBucket {
    None,
    Small,
    Medium,
    Large,
}

impl MetalBucket {
    pub const SMALL_MAX: f64 = 0.005;
    pub const MEDIUM_MAX: f64 = 0.015;

    pub fn of(metal_px: usize, image_px: usize) -> Self {
        let f = metal_px as f64 / image_px as f64;
        match metal_px {
            0 => MetalBucket::None,
            _ if f <= Self::SMALL_MAX => MetalBucket::Small,
            _ if f <= Self::MEDIUM_MAX => MetalBucket::Medium,
            _ => MetalBucket::Large,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MetalBucket::None => "none",
            MetalBucket::Small => "small",
            MetalBucket::Medium => "medium",
            MetalBucket::Large => "large",
        }
    }
}

/// What produces the image scored for each sample.
#[derive(Debug, Clone)]
pub enum Method {
    GroundTruth,
    /// The filtered back-projection initialization `X_0`.
    Input(SolverConfig),
    Solver {
        model: Unrolled,
        store: ParamStore<f64>,
        checkpoint: Option<CheckpointManifest>,
    },
}

impl Method {
    /// A solver without learned parts.
    pub fn classical(config: &SolverConfig) -> Result<Self> {
        let model = Unrolled::new(config)?;
        let store = model.default_store()?;
        Ok(Method::Solver {
            model,
            store,
            checkpoint: None,
        })
    }

    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (model, store, manifest) = load_checkpoint(dir)?;
        Ok(Method::Solver {
            model,
            store,
            checkpoint: Some(manifest),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Method::GroundTruth => "ground-truth".into(),
            Method::Input(_) => "input".into(),
            Method::Solver { model, .. } => prox_name(model.config.prox).into(),
        }
    }

    pub fn solver_config(&self) -> Option<&SolverConfig> {
        match self {
            Method::GroundTruth => None,
            Method::Input(c) => Some(c),
            Method::Solver { model, .. } => Some(&model.config),
        }
    }

    pub fn checkpoint(&self) -> Option<&CheckpointManifest> {
        match self {
            Method::Solver { checkpoint, .. } => checkpoint.as_ref(),
            _ => None,
        }
    }

    /// Full solver output for one prepared sample; `None` for methods without iterates.
    pub fn run(&self, ctx: &SolverContext<f64>, sample: &Prepared) -> Result<Option<SolverState<f64>>> {
        match self {
            Method::Solver { model, store, .. } => Ok(Some(model.run(ctx, &sample.problem, store)?)),
            _ => Ok(None),
        }
    }

    /// The image scored for `sample`.
    pub fn reconstruct(&self, ctx: &SolverContext<f64>, sample: &Prepared) -> Result<Image<f64>> {
        match self {
            Method::GroundTruth => Ok(sample.record.x_gt.clone()),
            Method::Input(_) => Ok(sample.problem.x0().clone()),
            Method::Solver { .. } => Ok(self.run(ctx, sample)?.expect("solver methods have iterates").final_x().clone()),
        }
    }
}

pub fn prox_name(kind: ProxKind) -> &'static str {
    match kind {
        ProxKind::Identity => "identity",
        ProxKind::SoftThreshold => "soft-threshold",
        ProxKind::LearnedStandard => "learned-standard",
        ProxKind::LearnedEquivariant => "learned-equivariant",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: String,
    pub rate: usize,
    pub metal_px: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub rate: usize,
    pub bucket: MetalBucket,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: Option<String>,
    pub checkpoint_id: Option<String>,
    pub geometry_hash: String,
    pub image_px: usize,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub groups: Vec<GroupMean>,
}

/// Zeroes the metal pixels.
pub fn mask_metal(x: &Image<f64>, metal: &BinaryImageMask) -> Result<Image<f64>> {
    let (h, w) = x.shape();
    if metal.shape() != (h, w) {
        return Err(Error::ShapeMismatch(format!("metal mask {:?} vs image {:?}", metal.shape(), (h, w))));
    }
    let d = x.data().iter().zip(metal.data()).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
    Image::new(h, w, d)
}

/// PSNR and SSIM of `x` against the sample's ground truth, outside the metal.
pub fn score(x: &Image<f64>, sample: &Prepared) -> Result<(f64, f64)> {
    let a = mask_metal(x, &sample.record.metal)?;
    let b = mask_metal(&sample.record.x_gt, &sample.record.metal)?;
    Ok((psnr(&a, &b, PEAK)?, ssim(&a, &b, PEAK)?))
}

/// Errors unless the checkpoint (if any) was trained on the dataset's geometry.
pub fn check_geometry(method: &Method, dataset: &Dataset) -> Result<()> {
    if let Some(hash) = method.checkpoint().and_then(|c| c.header.geometry_hash.as_ref()) {
        if *hash != dataset.manifest.geometry_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint geometry {hash} differs from dataset geometry {}",
                dataset.manifest.geometry_hash
            )));
        }
    }
    Ok(())
}

/// Scores `method` on every record of `dataset`.
pub fn evaluate(dataset: &Dataset, method: &Method, config_hash: Option<String>) -> Result<EvalReport> {
    check_geometry(method, dataset)?;
    let solver = method.solver_config().cloned().unwrap_or_default();
    let ctx = SolverContext::new(dataset.geometry(), &solver)?;
    let samples = prepare_dataset(dataset, &ctx, &solver)?;
    let rows = samples
        .par_iter()
        .map(|s| {
            let x = method.reconstruct(&ctx, s)?;
            let (p, q) = score(&x, s)?;
            Ok(EvalRow {
                sample: s.id.clone(),
                rate: s.rate,
                metal_px: s.metal_px,
                psnr: p,
                ssim: q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = dataset.geometry().image_shape();
    Ok(EvalReport::new(
        method.name(),
        config_hash,
        method.checkpoint().map(|c| c.checkpoint_id.clone()),
        dataset.manifest.geometry_hash.clone(),
        h * w,
        rows,
    ))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn new(method: String, config_hash: Option<String>, checkpoint_id: Option<String>, geometry_hash: String, image_px: usize, rows: Vec<EvalRow>) -> Self {
        let mut by: BTreeMap<(usize, MetalBucket), Vec<&EvalRow>> = BTreeMap::new();
        for r in &rows {
            by.entry((r.rate, MetalBucket::of(r.metal_px, image_px))).or_default().push(r);
        }
        let groups = by
            .into_iter()
            .map(|((rate, bucket), rs)| GroupMean {
                rate,
                bucket,
                count: rs.len(),
                psnr: mean(rs.iter().map(|r| r.psnr)),
                ssim: mean(rs.iter().map(|r| r.ssim)),
            })
            .collect();
        Self {
            method,
            config_hash,
            checkpoint_id,
            geometry_hash,
            image_px,
            mean_psnr: mean(rows.iter().map(|r| r.psnr)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            rows,
            groups,
        }
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6}", r.sample, r.rate, r.metal_px, r.psnr, r.ssim);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Methods as rows, `(rate, metal size)` groups as columns, cells `PSNR/SSIM`.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut cols: Vec<(usize, MetalBucket)> = reports.iter().flat_map(|r| r.groups.iter().map(|g| (g.rate, g.bucket))).collect();
    cols.sort();
    cols.dedup();
    let name_w = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<name_w$}", "method");
    for (rate, b) in &cols {
        let _ = write!(out, " | {:>14}", format!("x{rate} {}", b.label()));
    }
    let _ = writeln!(out, " | {:>14}", "mean");
    for r in reports {
        let _ = write!(out, "{:<name_w$}", r.method);
        for c in &cols {
            match r.groups.iter().find(|g| (g.rate, g.bucket) == *c) {
                Some(g) => {
                    let _ = write!(out, " | {:>14}", format!("{:.2}/{:.4}", g.psnr, g.ssim));
                }
                None => {
                    let _ = write!(out, " | {:>14}", "-");
                }
            }
        }
        let _ = writeln!(out, " | {:>14}", format!("{:.2}/{:.4}", r.mean_psnr, r.mean_ssim));
    }
    out
}
