//! Named parameter storage, checkpoints, and the two proximal networks.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{finite_difference_check, BnMode, BnUpdate, Dims, GradCheck, Graph, NodeId, BN_MOMENTUM};
use crate::equivariant::{EqFilterBank, GroupBasis};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_io::{encode, read_tensor, write_tensor};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub dims: Dims,
    pub value: Vec<T>,
    pub trainable: bool,
    /// Values are clamped to at least this after every update.
    pub lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch-norm behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters in registration order plus running batch-norm statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    stats: Vec<(String, RunningStats<T>)>,
    stat_index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            stats: Vec::new(),
            stat_index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, dims: Dims, value: Vec<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidParameter(format!("duplicate parameter name {name}")));
        }
        if dims.iter().product::<usize>() != value.len() {
            return Err(Error::ShapeMismatch(format!("parameter {name}: dims {dims:?} vs {} values", value.len())));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            dims,
            value,
            trainable,
            lower: None,
        });
        Ok(())
    }

    pub fn add_stats(&mut self, name: &str, channels: usize) -> Result<()> {
        if self.stat_index.contains_key(name) {
            return Err(Error::InvalidParameter(format!("duplicate statistics name {name}")));
        }
        self.stat_index.insert(name.to_string(), self.stats.len());
        self.stats.push((
            name.to_string(),
            RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
            },
        ));
        Ok(())
    }

    pub fn set_lower(&mut self, name: &str, lower: f64) -> Result<()> {
        self.get_mut(name)?.lower = Some(lower);
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::InvalidParameter(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::InvalidParameter(format!("unknown parameter {name}"))),
        }
    }

    pub fn stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn running(&self, name: &str) -> Result<&RunningStats<T>> {
        self.stat_index
            .get(name)
            .map(|&i| &self.stats[i].1)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown statistics {name}")))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Registers the parameter in `g` with its current value.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        let e = self.get(name)?;
        g.param(name, e.dims, &e.value, e.trainable)
    }

    pub fn bn_mode(&self, name: &str, mode: Mode) -> Result<BnMode<T>> {
        Ok(match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => {
                let s = self.running(name)?;
                BnMode::Eval {
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                }
            }
        })
    }

    /// `running ← (1 − m)·running + m·batch`, in the order the updates were recorded.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            let i = *self
                .stat_index
                .get(&u.name)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown statistics {}", u.name)))?;
            let s = &mut self.stats[i].1;
            if s.mean.len() != u.mean.len() || s.var.len() != u.var.len() {
                return Err(Error::ShapeMismatch(format!("statistics {} changed channel count", u.name)));
            }
            for (r, &b) in s.mean.iter_mut().zip(&u.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in s.var.iter_mut().zip(&u.var) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }

    pub fn clamp(&mut self) {
        for e in &mut self.entries {
            if let Some(lo) = e.lower {
                let lo = T::lit(lo);
                for v in &mut e.value {
                    if *v < lo {
                        *v = lo;
                    }
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    dims: e.dims,
                    value: conv(&e.value),
                    trainable: e.trainable,
                    lower: e.lower,
                })
                .collect(),
            index: self.index.clone(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
            stat_index: self.stat_index.clone(),
        }
    }

    /// Digest of every stored tensor as it is persisted.
    pub fn content_id(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(encode(&e.dims, &e.value).expect("consistent entry"));
        }
        for (n, s) in &self.stats {
            h.update(n.as_bytes());
            h.update(encode(&[s.mean.len()], &s.mean).expect("consistent stats"));
            h.update(encode(&[s.var.len()], &s.var).expect("consistent stats"));
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Writes `checkpoint.json` and one tensor file per parameter and statistic.
    pub fn save(&self, dir: &Path, header: &CheckpointHeader) -> Result<CheckpointManifest> {
        for sub in [dir.to_path_buf(), dir.join("params"), dir.join("stats")] {
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        let mut params = Vec::new();
        for e in &self.entries {
            let file = format!("params/{}.ctt", e.name);
            write_tensor(&dir.join(&file), &e.dims, &e.value)?;
            params.push(ParamRecord {
                name: e.name.clone(),
                dims: e.dims,
                trainable: e.trainable,
                lower: e.lower,
                file,
            });
        }
        let mut stats = Vec::new();
        for (n, s) in &self.stats {
            let mean = format!("stats/{n}.mean.ctt");
            let var = format!("stats/{n}.var.ctt");
            write_tensor(&dir.join(&mean), &[s.mean.len()], &s.mean)?;
            write_tensor(&dir.join(&var), &[s.var.len()], &s.var)?;
            stats.push(StatRecord {
                name: n.clone(),
                channels: s.mean.len(),
                mean,
                var,
            });
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            checkpoint_id: self.content_id(),
            header: header.clone(),
            params,
            stats,
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let manifest = CheckpointManifest::read(dir)?;
        let mut store = Self::new();
        for p in &manifest.params {
            let t = read_tensor::<T>(&dir.join(&p.file))?;
            if t.shape != p.dims {
                return Err(Error::Format {
                    path: dir.join(&p.file),
                    msg: format!("shape {:?}, manifest says {:?}", t.shape, p.dims),
                });
            }
            store.add(&p.name, p.dims, t.data, p.trainable)?;
            store.get_mut(&p.name)?.lower = p.lower;
        }
        for s in &manifest.stats {
            store.add_stats(&s.name, s.channels)?;
            let mean = read_tensor::<T>(&dir.join(&s.mean))?.data;
            let var = read_tensor::<T>(&dir.join(&s.var))?.data;
            if mean.len() != s.channels || var.len() != s.channels {
                return Err(Error::Format {
                    path: dir.join(&s.mean),
                    msg: format!("statistics {} need {} channels", s.name, s.channels),
                });
            }
            let i = store.stat_index[&s.name];
            store.stats[i].1 = RunningStats { mean, var };
        }
        Ok((store, manifest))
    }
}

/// Run metadata recorded with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: u64,
    pub config_hash: Option<String>,
    pub geometry_hash: Option<String>,
    /// Architecture description needed to rebuild the model.
    pub model: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub dims: Dims,
    pub trainable: bool,
    pub lower: Option<f64>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub name: String,
    pub channels: usize,
    pub mean: String,
    pub var: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub checkpoint_id: String,
    pub header: CheckpointHeader,
    pub params: Vec<ParamRecord>,
    pub stats: Vec<StatRecord>,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("checkpoint version {} (supported: {CHECKPOINT_VERSION})", m.version),
            });
        }
        Ok(m)
    }
}

/// Trainable scalars of a free `c_in → c_out` convolution with `k × k` kernels.
pub fn conv_param_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k
}

/// Trainable scalars of an equivariant convolution (`a` and `b` coefficient sets).
pub fn eq_conv_param_count(c_in: usize, c_out: usize, n: usize, p: usize, group_input: bool) -> usize {
    2 * EqFilterBank::<f64>::coef_len(c_out, c_in, n, p, group_input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProxArch {
    Standard { width: usize },
    /// `channels` per orientation over the cyclic group of order `group`.
    Equivariant { channels: usize, group: usize, p: usize },
}

pub const PROX_BLOCKS: usize = 4;

/// Residual proximal network mapping `[1, H, W]` to `[1, H, W]`.
#[derive(Debug, Clone)]
pub struct ProxNet {
    pub arch: ProxArch,
    pub prefix: String,
    basis: Option<Arc<GroupBasis>>,
}

fn uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-b..b)).collect()
}

fn lit<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::lit).collect()
}

impl ProxNet {
    pub fn new(arch: ProxArch, prefix: &str) -> Result<Self> {
        let basis = match arch {
            ProxArch::Standard { width } => {
                if width == 0 {
                    return Err(Error::InvalidParameter("prox net width must be positive".into()));
                }
                None
            }
            ProxArch::Equivariant { channels, group, p } => {
                if channels == 0 {
                    return Err(Error::InvalidParameter("prox net channels must be positive".into()));
                }
                Some(Arc::new(GroupBasis::new(p, p, group)?))
            }
        };
        Ok(Self {
            arch,
            prefix: prefix.to_string(),
            basis,
        })
    }


    pub fn standard(prefix: &str, width: usize) -> Result<Self> {
        Self::new(ProxArch::Standard { width }, prefix)
    }

    pub fn equivariant(prefix: &str, channels: usize, group: usize, p: usize) -> Result<Self> {
        Self::new(ProxArch::Equivariant { channels, group, p }, prefix)
    }

    fn name(&self, layer: &str) -> String {
        match self.arch {
            ProxArch::Standard { .. } => format!("std.{}.{layer}", self.prefix),
            ProxArch::Equivariant { .. } => format!("eq.{}.{layer}", self.prefix),
        }
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self.arch {
            ProxArch::Standard { width: c } => {
                conv_param_count(1, c, 3) + PROX_BLOCKS * 2 * (conv_param_count(c, c, 3) + 2 * c) + conv_param_count(c, 1, 3)
            }
            ProxArch::Equivariant { channels: c, group: n, p } => {
                eq_conv_param_count(1, c, n, p, false)
                    + PROX_BLOCKS * 2 * (eq_conv_param_count(c, c, n, p, true) + 2 * c)
                    + conv_param_count(c, 1, 1)
            }
        }
    }

    /// Adds every parameter and statistic with its initial value.
    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        match self.arch {
            ProxArch::Standard { width: c } => {
                store.add(&self.name("entry.w"), [c, 1, 9], lit(uniform(rng, c * 9, 9)), true)?;
                for b in 0..PROX_BLOCKS {
                    for i in 1..=2 {
                        store.add(&self.name(&format!("b{b}.c{i}.w")), [c, c, 9], lit(uniform(rng, c * c * 9, c * 9)), true)?;
                        self.register_bn(store, &format!("b{b}.bn{i}"), c)?;
                    }
                }
                store.add(&self.name("exit.w"), [1, c, 9], vec![T::zero(); c * 9], true)?;
            }
            ProxArch::Equivariant { channels: c, group: n, p } => {
                let lift = EqFilterBank::<f64>::coef_len(c, 1, n, p, false);
                let fan = p * p;
                store.add(&self.name("lift.a"), [1, 1, lift], lit(uniform(rng, lift, fan)), true)?;
                store.add(&self.name("lift.b"), [1, 1, lift], lit(uniform(rng, lift, fan)), true)?;
                let gc = EqFilterBank::<f64>::coef_len(c, c, n, p, true);
                let fan = c * n * p * p;
                for b in 0..PROX_BLOCKS {
                    for i in 1..=2 {
                        store.add(&self.name(&format!("b{b}.c{i}.a")), [1, 1, gc], lit(uniform(rng, gc, fan)), true)?;
                        store.add(&self.name(&format!("b{b}.c{i}.b")), [1, 1, gc], lit(uniform(rng, gc, fan)), true)?;
                        self.register_bn(store, &format!("b{b}.bn{i}"), c)?;
                    }
                }
                store.add(&self.name("exit.w"), [1, c, 1], vec![T::zero(); c], true)?;
            }
        }
        Ok(())
    }

    fn register_bn<T: Scalar>(&self, store: &mut ParamStore<T>, layer: &str, c: usize) -> Result<()> {
        store.add(&self.name(&format!("{layer}.gamma")), [1, 1, c], vec![T::one(); c], true)?;
        store.add(&self.name(&format!("{layer}.beta")), [1, 1, c], vec![T::zero(); c], true)?;
        store.add_stats(&self.name(layer), c)
    }

    fn bn<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, layer: &str, groups: usize, mode: Mode) -> Result<NodeId> {
        let stat = self.name(layer);
        let gamma = store.bind(g, &format!("{stat}.gamma"))?;
        let beta = store.bind(g, &format!("{stat}.beta"))?;
        g.batch_norm(x, gamma, beta, groups, store.bn_mode(&stat, mode)?, &stat)
    }

    fn eq_conv<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, layer: &str, c_out: usize, c_in: usize, group_input: bool) -> Result<NodeId> {
        let basis = self.basis.clone().expect("equivariant net has a basis");
        let h = basis.h();
        let a = store.bind(g, &self.name(&format!("{layer}.a")))?;
        let b = store.bind(g, &self.name(&format!("{layer}.b")))?;
        let w = g.eq_expand(a, b, basis, c_out, c_in, group_input)?;
        g.conv2d(x, w, h)
    }

    /// Output node for input node `x` of dims `[1, H, W]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let d = g.dims(x);
        if d[0] != 1 {
            return Err(Error::ShapeMismatch(format!("prox net {} expects one input channel, got dims {d:?}", self.prefix)));
        }
        let feat = match self.arch {
            ProxArch::Standard { .. } => {
                let w = store.bind(g, &self.name("entry.w"))?;
                let mut f = g.conv2d(x, w, 3)?;
                for b in 0..PROX_BLOCKS {
                    let w1 = store.bind(g, &self.name(&format!("b{b}.c1.w")))?;
                    let y = g.conv2d(f, w1, 3)?;
                    let y = self.bn(g, store, y, &format!("b{b}.bn1"), 1, mode)?;
                    let y = g.relu(y)?;
                    let w2 = store.bind(g, &self.name(&format!("b{b}.c2.w")))?;
                    let y = g.conv2d(y, w2, 3)?;
                    let y = self.bn(g, store, y, &format!("b{b}.bn2"), 1, mode)?;
                    f = g.add(f, y)?;
                }
                let w = store.bind(g, &self.name("exit.w"))?;
                g.conv2d(f, w, 3)?
            }
            ProxArch::Equivariant { channels: c, group: n, .. } => {
                let mut f = self.eq_conv(g, store, x, "lift", c, 1, false)?;
                for b in 0..PROX_BLOCKS {
                    let y = self.eq_conv(g, store, f, &format!("b{b}.c1"), c, c, true)?;
                    let y = self.bn(g, store, y, &format!("b{b}.bn1"), n, mode)?;
                    let y = g.relu(y)?;
                    let y = self.eq_conv(g, store, y, &format!("b{b}.c2"), c, c, true)?;
                    let y = self.bn(g, store, y, &format!("b{b}.bn2"), n, mode)?;
                    f = g.add(f, y)?;
                }
                let f = g.project_group(f, n)?;
                let w = store.bind(g, &self.name("exit.w"))?;
                g.conv2d(f, w, 1)?
            }
        };
        g.add(x, feat)
    }

    /// Convenience forward pass on a plain `H × W` array.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, height: usize, width: usize, x: &[T], mode: Mode) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let xi = g.input([1, height, width], x.to_vec())?;
        let y = self.apply(&mut g, store, xi, mode)?;
        Ok(g.value(y).to_vec())
    }
}

/// Finite-difference check of `build`'s loss over every trainable scalar in `store`.
pub fn store_gradient_check<F>(store: &ParamStore<f64>, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let names: Vec<String> = store.entries().iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect();
    let values: Vec<Vec<f64>> = names.iter().map(|n| store.get(n).map(|e| e.value.clone())).collect::<Result<_>>()?;
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .zip(&values)
        .map(|(n, v)| grads.param(n).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();
    finite_difference_check(&values, &analytic, h, |vals| {
        let mut s = store.clone();
        for (n, v) in names.iter().zip(vals) {
            s.get_mut(n)?.value.clone_from(v);
        }
        let mut g = Graph::new();
        let loss = build(&mut g, &s)?;
        Ok(g.probe(loss))
    })
}
