//! Run configuration files and their hashes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{MetalSpec, PhantomSpec};
use crate::projector::FanBeamGeometry;
use crate::simulate::{make_dataset, plan_dataset, CorruptionParams};
use crate::solver::{ProxKind, SolverConfig};
use crate::train::{LossConfig, TrainConfig};

/// First 16 hex digits of the SHA-256 of the canonical JSON form of `value`.
pub fn digest_json<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub height: usize,
    pub width: usize,
    pub views: usize,
    /// Detector bins; `1.5·max(height, width)` when absent.
    pub bins: Option<usize>,
    pub fov: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            views: 128,
            bins: None,
            fov: FanBeamGeometry::DEFAULT_FOV,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<FanBeamGeometry> {
        let bins = self.bins.unwrap_or((1.5 * self.height.max(self.width) as f64).round() as usize);
        FanBeamGeometry::scaled(self.height, self.width, self.views, bins, self.fov)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of random head phantoms.
    pub phantoms: usize,
    /// Put the Shepp–Logan phantom first.
    pub shepp_logan: bool,
    /// Metal sizes in pixels; each gets a random position and shape.
    pub metal_px: Vec<usize>,
    pub rate: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            phantoms: 2,
            shepp_logan: false,
            metal_px: vec![118, 35],
            rate: 4,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn phantom_specs(&self) -> Vec<PhantomSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.phantoms + 1);
        if self.shepp_logan {
            out.push(PhantomSpec::shepp_logan());
        }
        out.extend((0..self.phantoms).map(|_| PhantomSpec::random_head(&mut rng)));
        out
    }

    pub fn metal_specs(&self) -> Vec<MetalSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_7461_6c00);
        self.metal_px
            .iter()
            .map(|&pixels| {
                let r = 0.45 * rng.gen_range(0.0f64..1.0).sqrt();
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                MetalSpec {
                    cx: r * phi.cos(),
                    cy: r * phi.sin(),
                    pixels,
                    aspect: rng.gen_range(0.5..1.0),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                }
            })
            .collect()
    }
}

/// Everything a run needs, read from a TOML file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub corruption: CorruptionParams,
    pub dataset: DatasetConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    /// Stable across key order and formatting of the source file.
    pub fn hash(&self) -> String {
        digest_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry.build()?;
        self.solver.validate()?;
        self.train.validate()?;
        self.loss.weights(self.solver.stages)?;
        plan_dataset(&self.dataset.phantom_specs(), &self.dataset.metal_specs(), &geom, &self.corruption, self.dataset.rate)?;
        Ok(())
    }

    /// Writes the configured dataset to `out`; returns the record count.
    pub fn simulate(&self, out: &Path) -> Result<usize> {
        let geom = self.geometry.build()?;
        make_dataset(
            &self.dataset.phantom_specs(),
            &self.dataset.metal_specs(),
            &geom,
            &self.corruption,
            self.dataset.rate,
            out,
            Some(self.hash()),
        )
    }

    /// The desk-scale training setup: 64×64, 128 views, ×4, ten phantoms times
    /// three metals, five stages, width 8, 200 steps at learning rate 1e-3.
    pub fn desk(prox: ProxKind) -> Self {
        Self {
            dataset: DatasetConfig {
                phantoms: 10,
                metal_px: vec![118, 53, 35],
                seed: 1,
                ..Default::default()
            },
            solver: SolverConfig {
                stages: 5,
                prox,
                width: 8,
                eq_channels: 1,
                group: 8,
                ..Default::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 7,
                max_steps: Some(200),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Held-out desk samples: five phantoms, one metal each, at the given rate.
    pub fn desk_test(prox: ProxKind, rate: usize) -> Self {
        let mut c = Self::desk(prox);
        c.dataset = DatasetConfig {
            phantoms: 5,
            metal_px: vec![88],
            rate,
            seed: 1001,
            ..Default::default()
        };
        c
    }
}
