//! Deep-supervision loss, Adam, and the training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{CheckpointHeader, CheckpointManifest, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::simulate::{Dataset, SampleRecord};
use crate::solver::{Problem, SolverConfig, SolverContext, StageNodes, Unrolled};

pub const LOSS_CURVE: &str = "loss_curve.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    /// Squared Euclidean norm.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Explicit per-stage weights `γ_1..γ_K`; overrides the two values below.
    pub gamma: Option<Vec<f64>>,
    pub gamma_final: f64,
    pub gamma_stage: f64,
    pub beta: f64,
    pub norm: Norm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            gamma_final: 1.0,
            gamma_stage: 0.1,
            beta: 0.1,
            norm: Norm::L1,
        }
    }
}

impl LossConfig {
    /// Weights of stages `1..=stages`.
    pub fn weights(&self, stages: usize) -> Result<Vec<f64>> {
        let w = match &self.gamma {
            Some(g) if g.len() != stages => {
                return Err(Error::InvalidParameter(format!("{} stage weights for {stages} stages", g.len())));
            }
            Some(g) => g.clone(),
            None => (1..=stages).map(|k| if k == stages { self.gamma_final } else { self.gamma_stage }).collect(),
        };
        if !(w.last().copied().unwrap_or(0.0) > 0.0) || w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("stage weights {w:?}: need all ≥ 0 and the last > 0")));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta = {} must be ≥ 0", self.beta)));
        }
        Ok(w)
    }
}

fn norm_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, norm: Norm) -> Result<NodeId> {
    match norm {
        Norm::L1 => g.sum_abs(x),
        Norm::L2 => g.sum_squares(x),
    }
}

/// `Σ_k γ_k‖X_k − X_gt‖ + β Σ_k γ_k‖Ȳ⊙S̄_k − Y_gt‖` over stages `1..=K`.
pub fn loss<T: Scalar>(g: &mut Graph<T>, nodes: &StageNodes, x_gt: &[T], y_gt: &[T], cfg: &LossConfig) -> Result<NodeId> {
    let stages = nodes.x.len() - 1;
    let w = cfg.weights(stages)?;
    let xd = g.dims(nodes.x[0]);
    let sd = g.dims(nodes.s_bar[0]);
    let xg = g.input(xd, x_gt.to_vec()).map_err(|_| Error::ShapeMismatch(format!("ground truth of {} values for image dims {xd:?}", x_gt.len())))?;
    let yg = g.input(sd, y_gt.to_vec()).map_err(|_| Error::ShapeMismatch(format!("ground truth of {} values for sinogram dims {sd:?}", y_gt.len())))?;
    let mut total: Option<NodeId> = None;
    for k in 1..=stages {
        let dx = g.sub(nodes.x[k], xg)?;
        let mut term = norm_node(g, dx, cfg.norm)?;
        if cfg.beta > 0.0 {
            let ys = g.mul(nodes.ybar, nodes.s_bar[k])?;
            let ds = g.sub(ys, yg)?;
            let ns = norm_node(g, ds, cfg.norm)?;
            let ns = g.scale(ns, T::lit(cfg.beta))?;
            term = g.add(term, ns)?;
        }
        let term = g.scale(term, T::lit(w[k - 1]))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Graph("loss over zero stages".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay: 0.5,
            decay_every: 40,
            batch_size: 1,
            epochs: 1,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs β₁, β₂ in [0, 1) and ε > 0".into());
        }
        if !(self.decay > 0.0) || self.decay_every == 0 {
            return bad("decay factor and period must be positive".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch size {} (only 1 is supported)", self.batch_size));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam moments for every trainable parameter, in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update followed by the store's lower clamps.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &Gradients<f64>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let Some(g) = grads.param(&e.name) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                e.value[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
        store.clamp();
    }
}

/// A training or evaluation sample with its solver inputs precomputed.
pub struct Prepared {
    pub id: String,
    pub rate: usize,
    pub metal_px: usize,
    pub record: SampleRecord<f64>,
    pub problem: Problem<f64>,
}

/// Loads record `index` of `dataset` and computes its solver inputs.
pub fn prepare_record(dataset: &Dataset, ctx: &SolverContext<f64>, cfg: &SolverConfig, index: usize) -> Result<Prepared> {
    let record = dataset.load::<f64>(index)?;
    let problem = Problem::new(ctx, cfg, &record.y_svma, &record.tr, &record.d)?;
    let entry = &dataset.manifest.records[index];
    Ok(Prepared {
        id: entry.id.clone(),
        rate: dataset.manifest.rate,
        metal_px: entry.metal_px,
        record,
        problem,
    })
}

/// Loads and prepares every record of `dataset` (in parallel, in manifest order).
pub fn prepare_dataset(dataset: &Dataset, ctx: &SolverContext<f64>, cfg: &SolverConfig) -> Result<Vec<Prepared>> {
    (0..dataset.len()).into_par_iter().map(|i| prepare_record(dataset, ctx, cfg, i)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore<f64>,
    pub curve: Vec<(usize, f64)>,
    pub manifest: CheckpointManifest,
}

/// Loss and gradients of one sample.
pub fn sample_gradients(model: &Unrolled, ctx: &SolverContext<f64>, sample: &Prepared, store: &ParamStore<f64>, loss_cfg: &LossConfig) -> Result<(f64, Gradients<f64>, Graph<f64>)> {
    let mut g = Graph::new();
    let nodes = model.unroll(&mut g, ctx, &sample.problem, store, Mode::Train)?;
    let l = loss(&mut g, &nodes, sample.record.x_gt.data(), sample.record.y_gt.data(), loss_cfg)?;
    let grads = g.backward(l)?;
    Ok((g.scalar(l), grads, g))
}

/// Trains on every record of `dataset` and writes the checkpoint and loss curve into `out`.
pub fn train(dataset: &Dataset, solver: &SolverConfig, cfg: &TrainConfig, loss_cfg: &LossConfig, out: &Path, config_hash: Option<String>) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.weights(solver.stages)?;
    if dataset.is_empty() {
        return Err(Error::InvalidSpec("training set is empty".into()));
    }
    let model = Unrolled::new(solver)?;
    let ctx = SolverContext::new(dataset.geometry(), solver)?;
    let samples = prepare_dataset(dataset, &ctx, solver)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.init_store::<f64, _>(&mut rng)?;
    let mut adam = Adam::new(&store);
    let mut curve = Vec::new();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64)));
        let lr = cfg.lr_at_epoch(epoch);
        for &i in &order {
            if step >= limit {
                break 'epochs;
            }
            step += 1;
            let (l, grads, g) = match sample_gradients(&model, &ctx, &samples[i], &store, loss_cfg) {
                Ok(v) => v,
                Err(Error::Diverged { .. }) => return Err(Error::TrainingDiverged { step }),
                Err(e) => return Err(e),
            };
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            store.apply_bn_updates(g.bn_updates())?;
            adam.step(&mut store, &grads, lr, cfg);
            curve.push((step, l));
            log::debug!("step {step} epoch {epoch} sample {} loss {l:.6}", samples[i].id);
        }
    }
    let header = CheckpointHeader {
        step: step as u64,
        config_hash,
        geometry_hash: Some(dataset.manifest.geometry_hash.clone()),
        model: serde_json::to_value(solver).map_err(|e| Error::Config(e.to_string()))?,
    };
    let manifest = store.save(out, &header)?;
    write_loss_curve(&out.join(LOSS_CURVE), &curve)?;
    Ok(TrainOutcome { store, curve, manifest })
}

pub fn write_loss_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (s, l) in curve {
        text.push_str(&format!("{s},{l:.9e}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model recorded in a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Unrolled, ParamStore<f64>, CheckpointManifest)> {
    let (store, manifest) = ParamStore::<f64>::load(dir)?;
    let solver: SolverConfig = serde_json::from_value(manifest.header.model.clone()).map_err(|e| Error::Format {
        path: dir.join(crate::nn::CHECKPOINT_MANIFEST),
        msg: format!("model description: {e}"),
    })?;
    let model = Unrolled::new(&solver)?;
    let expected = model.param_count();
    if store.trainable_count() != expected {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} trainable values, the recorded model needs {expected}",
            store.trainable_count()
        )));
    }
    Ok((model, store, manifest))
}
