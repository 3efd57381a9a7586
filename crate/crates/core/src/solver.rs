//! Dual-domain reconstruction model and its unrolled proximal-gradient solver.
//!
//! The sinogram is split as `S = Ȳ ⊙ S̄` with a frozen normalizer `Ȳ`. Each
//! stage takes an explicit gradient step on `S̄` followed by a proximal map,
//! then the same on `X` using the freshly updated `S̄`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::linop::LinearOperator;
use crate::nn::{Mode, ParamStore, ProxArch, ProxNet};
use crate::projector::{operator_norm_estimate, FanBeamGeometry, FanBeamProjector, FbpFilter, FbpWindow, SinoMask, Sinogram};
use crate::scalar::Scalar;
use crate::simulate::linear_interp_fill;
use crate::tensor_io::write_tensor;

pub const ETA1: &str = "solver.eta1";
pub const ETA2: &str = "solver.eta2";
pub const LAMBDA: &str = "solver.lambda";
pub const TAU_S: &str = "solver.tau_s";
pub const TAU_X: &str = "solver.tau_x";
/// Lower clamp for every trainable solver scalar.
pub const SCALAR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxKind {
    Identity,
    SoftThreshold,
    LearnedStandard,
    LearnedEquivariant,
}

impl ProxKind {
    pub fn is_learned(self) -> bool {
        matches!(self, Self::LearnedStandard | Self::LearnedEquivariant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub stages: usize,
    /// Fixed stepsizes; when absent the safe defaults are derived per sample.
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub lambda: f64,
    pub prox: ProxKind,
    pub tau_s: f64,
    pub tau_x: f64,
    pub shared_weights: bool,
    /// Width of standard prox nets (both domains).
    pub width: usize,
    /// Channels per orientation of equivariant prox nets.
    pub eq_channels: usize,
    pub group: usize,
    pub p: usize,
    /// Normalizer floor as a fraction of the trusted-entry mean.
    pub eps_scale: f64,
    pub fbp_window: FbpWindow,
    pub power_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            stages: 10,
            eta1: None,
            eta2: None,
            lambda: 1.0,
            prox: ProxKind::Identity,
            tau_s: 1e-4,
            tau_x: 1e-4,
            shared_weights: false,
            width: 16,
            eq_channels: 2,
            group: 8,
            p: 5,
            eps_scale: 1e-3,
            fbp_window: FbpWindow::Ramlak,
            power_iters: 30,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.stages == 0 {
            return bad("solver needs at least one stage".into());
        }
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name} = {v} must be a non-negative number"));
                }
            }
        }
        for (name, v) in [("lambda", self.lambda), ("tau_s", self.tau_s), ("tau_x", self.tau_x), ("eps_scale", self.eps_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.width == 0 || self.eq_channels == 0 || self.group == 0 || self.p == 0 {
            return bad("prox net sizes must be positive".into());
        }
        if self.power_iters < 10 {
            return bad(format!("power_iters = {} is below 10", self.power_iters));
        }
        Ok(())
    }
}

/// Fixed per-geometry operators.
pub struct SolverContext<T: Scalar> {
    pub projector: Arc<FanBeamProjector<T>>,
    pub fbp: FbpFilter<T>,
    /// Estimate of `‖PᵀP‖`.
    pub op_norm: f64,
}

impl<T: Scalar> SolverContext<T> {
    pub fn new(geom: &FanBeamGeometry, cfg: &SolverConfig) -> Result<Self> {
        let projector = Arc::new(FanBeamProjector::new(geom)?);
        let op_norm = operator_norm_estimate(&projector, cfg.power_iters)?;
        Ok(Self {
            fbp: FbpFilter::new(geom, cfg.fbp_window)?,
            projector,
            op_norm,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        self.projector.geometry()
    }

    fn op(&self) -> Arc<dyn LinearOperator<T>> {
        self.projector.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationData<T> {
    /// Linear-interpolation inpainting of the measured sinogram.
    pub filled: Sinogram<T>,
    pub x_prior: Image<T>,
    pub ybar: Sinogram<T>,
    pub eps: f64,
}

/// `X_prior = fbp(LI(Y))`, `Ȳ = max(P X_prior, ε)` with `ε = eps_scale · mean` of
/// `P X_prior` over trusted entries (or `eps_scale` when that mean is not positive).
pub fn compute_normalizer<T: Scalar>(ctx: &SolverContext<T>, y_svma: &Sinogram<T>, tr: &SinoMask, d: &SinoMask, eps_scale: f64) -> Result<NormalizationData<T>> {
    y_svma.check_geometry(ctx.geometry())?;
    let filled = linear_interp_fill(y_svma, tr, d)?;
    let x_prior = ctx.fbp.apply(&filled)?;
    let px = ctx.projector.forward(&x_prior)?;
    let untrusted = tr.union(d)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (v, &m) in px.data().iter().zip(untrusted.data()) {
        if !m {
            sum += v.as_f64();
            count += 1;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let eps = if mean > 0.0 { eps_scale * mean } else { eps_scale };
    let floor = T::lit(eps);
    let (nb, nv) = px.shape();
    let ybar = Sinogram::new(nb, nv, px.data().iter().map(|&v| if v > floor { v } else { floor }).collect())?;
    Ok(NormalizationData { filled, x_prior, ybar, eps })
}

/// Everything a solver run needs about one measurement.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    pub y_svma: Vec<T>,
    /// `1 − (Tr ∪ D)`.
    pub trusted: Arc<Vec<bool>>,
    pub norm: NormalizationData<T>,
    pub s0: Vec<T>,
    pub eta1_base: f64,
    pub eta2_base: f64,
}

impl<T: Scalar> Problem<T> {
    pub fn new(ctx: &SolverContext<T>, cfg: &SolverConfig, y_svma: &Sinogram<T>, tr: &SinoMask, d: &SinoMask) -> Result<Self> {
        cfg.validate()?;
        let norm = compute_normalizer(ctx, y_svma, tr, d, cfg.eps_scale)?;
        let trusted = tr.union(d)?.complement().data().to_vec();
        let s0 = norm.filled.data().iter().zip(norm.ybar.data()).map(|(&f, &b)| f / b).collect();
        let peak = norm.ybar.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64() * v.as_f64()));
        let eta1_base = cfg.eta1.unwrap_or(0.9 / (peak * (1.0 + cfg.lambda)));
        let eta2_base = match cfg.eta2 {
            Some(v) => v,
            None if ctx.op_norm > 0.0 => 0.9 / ctx.op_norm,
            None => 0.0,
        };
        Ok(Self {
            y_svma: y_svma.data().to_vec(),
            trusted: Arc::new(trusted),
            norm,
            s0,
            eta1_base,
            eta2_base,
        })
    }

    pub fn x0(&self) -> &Image<T> {
        &self.norm.x_prior
    }
}

/// Proximal map applied after a gradient step.
#[derive(Clone, Copy)]
pub enum Prox<'a, T: Scalar> {
    Identity,
    /// Soft threshold at the level held by a scalar node.
    Soft(NodeId),
    Net(&'a ProxNet, &'a ParamStore<T>, Mode),
}

impl<T: Scalar> Prox<'_, T> {
    pub fn apply(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match *self {
            Prox::Identity => Ok(x),
            Prox::Soft(tau) => g.soft_threshold(x, tau),
            Prox::Net(net, store, mode) => net.apply(g, store, x, mode),
        }
    }
}

/// Graph nodes shared by every stage.
#[derive(Clone)]
pub struct StageConsts<T: Scalar> {
    pub ybar: NodeId,
    pub y: NodeId,
    pub trusted: Arc<Vec<bool>>,
    pub op: Arc<dyn LinearOperator<T>>,
}

fn finite<T: Scalar>(g: &Graph<T>, id: NodeId, stage: usize, what: &str) -> Result<()> {
    if g.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage,
            what: what.to_string(),
        })
    }
}

/// `S̄_k = prox(S̄ − η₁(Ȳ⊙(Ȳ⊙S̄ − PX) + λ(1 − Tr∪D)⊙Ȳ⊙(Ȳ⊙S̄ − Y)))`; `px` is `P X_{k−1}`.
#[allow(clippy::too_many_arguments)]
pub fn s_step<T: Scalar>(g: &mut Graph<T>, c: &StageConsts<T>, s_bar: NodeId, px: NodeId, eta1: NodeId, lambda: NodeId, prox: Prox<'_, T>, stage: usize) -> Result<NodeId> {
    let ys = g.mul(c.ybar, s_bar)?;
    let r1 = g.sub(ys, px)?;
    let t1 = g.mul(c.ybar, r1)?;
    let r2 = g.sub(ys, c.y)?;
    let r2 = g.mask_select(r2, c.trusted.clone())?;
    let t2 = g.mul(c.ybar, r2)?;
    let t2 = g.scalar_mul(lambda, t2)?;
    let grad = g.add(t1, t2)?;
    let step = g.scalar_mul(eta1, grad)?;
    let pre = g.sub(s_bar, step)?;
    finite(g, pre, stage, "sinogram gradient step")?;
    let out = prox.apply(g, pre)?;
    finite(g, out, stage, "sinogram prox")?;
    Ok(out)
}

/// `X_k = prox(X − η₂ Pᵀ(P X − Ȳ⊙S̄_k))`; `px` is `P X_{k−1}`.
#[allow(clippy::too_many_arguments)]
pub fn x_step<T: Scalar>(g: &mut Graph<T>, c: &StageConsts<T>, x: NodeId, px: NodeId, s_bar: NodeId, eta2: NodeId, prox: Prox<'_, T>, stage: usize) -> Result<NodeId> {
    let ys = g.mul(c.ybar, s_bar)?;
    let r = g.sub(px, ys)?;
    let bp = g.linop(r, c.op.clone(), true)?;
    let step = g.scalar_mul(eta2, bp)?;
    let pre = g.sub(x, step)?;
    finite(g, pre, stage, "image gradient step")?;
    let out = prox.apply(g, pre)?;
    finite(g, out, stage, "image prox")?;
    Ok(out)
}

/// Node ids of every stage of an unrolled graph (index 0 is the initialization).
#[derive(Debug, Clone)]
pub struct StageNodes {
    pub s_bar: Vec<NodeId>,
    pub x: Vec<NodeId>,
    pub ybar: NodeId,
}

/// Iterates of a solver run; index 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState<T> {
    pub stage: usize,
    pub s_bar: Vec<Sinogram<T>>,
    pub x: Vec<Image<T>>,
    pub ybar: Sinogram<T>,
}

impl<T: Scalar> SolverState<T> {
    /// `S_k = Ȳ ⊙ S̄_k`.
    pub fn s(&self, k: usize) -> Sinogram<T> {
        let (nb, nv) = self.ybar.shape();
        let data = self.ybar.data().iter().zip(self.s_bar[k].data()).map(|(&a, &b)| a * b).collect();
        Sinogram::new(nb, nv, data).expect("matching shapes")
    }

    pub fn final_x(&self) -> &Image<T> {
        &self.x[self.stage]
    }

    /// Writes `S_k` and `X_k` for `k = 1..=K` as `stage_XX_s.ctt` / `stage_XX_x.ctt`.
    pub fn write_stage_dumps(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for k in 1..=self.stage {
            let s = self.s(k);
            let (nb, nv) = s.shape();
            let sn = format!("stage_{k:02}_s.ctt");
            write_tensor(&dir.join(&sn), &[nb, nv], s.data())?;
            let x = &self.x[k];
            let xn = format!("stage_{k:02}_x.ctt");
            write_tensor(&dir.join(&xn), &[x.height(), x.width()], x.data())?;
            names.push(sn);
            names.push(xn);
        }
        Ok(names)
    }
}

/// The unrolled network: configuration plus the prox nets of every stage.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub config: SolverConfig,
    s_nets: Vec<ProxNet>,
    x_nets: Vec<ProxNet>,
}

impl Unrolled {
    pub fn new(config: &SolverConfig) -> Result<Self> {
        config.validate()?;
        let (mut s_nets, mut x_nets) = (Vec::new(), Vec::new());
        if config.prox.is_learned() {
            let x_arch = match config.prox {
                ProxKind::LearnedEquivariant => ProxArch::Equivariant {
                    channels: config.eq_channels,
                    group: config.group,
                    p: config.p,
                },
                _ => ProxArch::Standard { width: config.width },
            };
            let count = if config.shared_weights { 1 } else { config.stages };
            for k in 0..count {
                let suffix = if config.shared_weights { String::new() } else { (k + 1).to_string() };
                s_nets.push(ProxNet::new(ProxArch::Standard { width: config.width }, &format!("s{suffix}"))?);
                x_nets.push(ProxNet::new(x_arch, &format!("x{suffix}"))?);
            }
        }
        Ok(Self {
            config: config.clone(),
            s_nets,
            x_nets,
        })
    }

    /// Prox nets of stage `k` (1-based), if the prox is learned.
    pub fn nets(&self, k: usize) -> Option<(&ProxNet, &ProxNet)> {
        if self.s_nets.is_empty() {
            return None;
        }
        let i = if self.config.shared_weights { 0 } else { k - 1 };
        Some((&self.s_nets[i], &self.x_nets[i]))
    }

    pub fn x_nets(&self) -> &[ProxNet] {
        &self.x_nets
    }

    /// Solver scalars plus (for learned prox kinds) freshly initialized nets.
    pub fn init_store<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        store.add(ETA1, [1, 1, 1], vec![T::one()], true)?;
        store.add(ETA2, [1, 1, 1], vec![T::one()], true)?;
        store.add(LAMBDA, [1, 1, 1], vec![T::lit(self.config.lambda)], true)?;
        let mut scalars = vec![ETA1, ETA2, LAMBDA];
        if self.config.prox == ProxKind::SoftThreshold {
            store.add(TAU_S, [1, 1, 1], vec![T::lit(self.config.tau_s)], true)?;
            store.add(TAU_X, [1, 1, 1], vec![T::lit(self.config.tau_x)], true)?;
            scalars.extend([TAU_S, TAU_X]);
        }
        for name in scalars {
            store.set_lower(name, SCALAR_FLOOR.min(store.get(name)?.value[0].as_f64()))?;
        }
        for (s, x) in self.s_nets.iter().zip(&self.x_nets) {
            s.register(&mut store, rng)?;
            x.register(&mut store, rng)?;
        }
        Ok(store)
    }

    /// Store for prox kinds without networks.
    pub fn default_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        if self.config.prox.is_learned() {
            return Err(Error::InvalidParameter("a learned prox needs a checkpoint".into()));
        }
        self.init_store(&mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Exact number of trainable scalars in [`Unrolled::init_store`].
    pub fn param_count(&self) -> usize {
        let scalars = if self.config.prox == ProxKind::SoftThreshold { 5 } else { 3 };
        scalars + self.s_nets.iter().chain(&self.x_nets).map(|n| n.param_count()).sum::<usize>()
    }

    /// Builds all `K` stages into `g`.
    pub fn unroll<T: Scalar>(&self, g: &mut Graph<T>, ctx: &SolverContext<T>, prob: &Problem<T>, store: &ParamStore<T>, mode: Mode) -> Result<StageNodes> {
        let geom = ctx.geometry();
        let sino = [1, geom.n_bins, geom.n_views];
        let img = [1, geom.image_height, geom.image_width];
        let c = StageConsts {
            ybar: g.input(sino, prob.norm.ybar.data().to_vec())?,
            y: g.input(sino, prob.y_svma.clone())?,
            trusted: prob.trusted.clone(),
            op: ctx.op(),
        };
        let m1 = store.bind(g, ETA1)?;
        let b1 = g.constant_scalar(T::lit(prob.eta1_base));
        let eta1 = g.scalar_mul(m1, b1)?;
        let m2 = store.bind(g, ETA2)?;
        let b2 = g.constant_scalar(T::lit(prob.eta2_base));
        let eta2 = g.scalar_mul(m2, b2)?;
        let lambda = store.bind(g, LAMBDA)?;
        let taus = if self.config.prox == ProxKind::SoftThreshold {
            Some((store.bind(g, TAU_S)?, store.bind(g, TAU_X)?))
        } else {
            None
        };
        let mut s_bar = vec![g.input(sino, prob.s0.clone())?];
        let mut x = vec![g.input(img, prob.norm.x_prior.data().to_vec())?];
        for k in 1..=self.config.stages {
            let (ps, px_prox) = match (self.nets(k), taus) {
                (Some((sn, xn)), _) => (Prox::Net(sn, store, mode), Prox::Net(xn, store, mode)),
                (None, Some((ts, tx))) => (Prox::Soft(ts), Prox::Soft(tx)),
                (None, None) => (Prox::Identity, Prox::Identity),
            };
            let (sp, xp) = (s_bar[k - 1], x[k - 1]);
            let px = g.linop(xp, c.op.clone(), false)?;
            let sk = s_step(g, &c, sp, px, eta1, lambda, ps, k)?;
            let xk = x_step(g, &c, xp, px, sk, eta2, px_prox, k)?;
            s_bar.push(sk);
            x.push(xk);
        }
        Ok(StageNodes { s_bar, x, ybar: c.ybar })
    }

    /// Inference run returning every stage.
    pub fn run<T: Scalar>(&self, ctx: &SolverContext<T>, prob: &Problem<T>, store: &ParamStore<T>) -> Result<SolverState<T>> {
        let mut g = Graph::new();
        let nodes = self.unroll(&mut g, ctx, prob, store, Mode::Eval)?;
        let geom = ctx.geometry();
        let (h, w) = geom.image_shape();
        let s_bar = nodes
            .s_bar
            .iter()
            .map(|&id| Sinogram::new(geom.n_bins, geom.n_views, g.value(id).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let x = nodes.x.iter().map(|&id| Image::new(h, w, g.value(id).to_vec())).collect::<Result<Vec<_>>>()?;
        Ok(SolverState {
            stage: self.config.stages,
            s_bar,
            x,
            ybar: prob.norm.ybar.clone(),
        })
    }
}

/// `‖PX − Ȳ⊙S̄‖² + λ‖(1 − Tr∪D)⊙(Ȳ⊙S̄ − Y)‖²`, plus `μ₁‖S̄‖₁ + μ₂‖X‖₁` when `mu` is given.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    projector: &FanBeamProjector<T>,
    s_bar: &[T],
    x: &[T],
    y_svma: &[T],
    trusted: &[bool],
    ybar: &[T],
    lambda: f64,
    mu: Option<(f64, f64)>,
) -> f64 {
    let px = projector.forward_flat(x);
    let mut fid = 0.0;
    let mut data = 0.0;
    for i in 0..px.len() {
        let ys = ybar[i].as_f64() * s_bar[i].as_f64();
        let r = px[i].as_f64() - ys;
        fid += r * r;
        if trusted[i] {
            let e = ys - y_svma[i].as_f64();
            data += e * e;
        }
    }
    let mut total = fid + lambda * data;
    if let Some((mu1, mu2)) = mu {
        total += mu1 * s_bar.iter().map(|v| v.as_f64().abs()).sum::<f64>();
        total += mu2 * x.iter().map(|v| v.as_f64().abs()).sum::<f64>();
    }
    total
}

/// Objective of stage `k` of a run, with the prox kind's regularizer weights.
pub fn stage_objective<T: Scalar>(ctx: &SolverContext<T>, prob: &Problem<T>, state: &SolverState<T>, store: &ParamStore<T>, cfg: &SolverConfig, k: usize) -> Result<f64> {
    let lambda = store.get(LAMBDA)?.value[0].as_f64();
    let mu = if cfg.prox == ProxKind::SoftThreshold {
        let eta1 = store.get(ETA1)?.value[0].as_f64() * prob.eta1_base;
        let eta2 = store.get(ETA2)?.value[0].as_f64() * prob.eta2_base;
        Some((store.get(TAU_S)?.value[0].as_f64() / eta1, store.get(TAU_X)?.value[0].as_f64() / eta2))
    } else {
        None
    };
    Ok(objective(
        &ctx.projector,
        state.s_bar[k].data(),
        state.x[k].data(),
        &prob.y_svma,
        &prob.trusted,
        state.ybar.data(),
        lambda,
        mu,
    ))
}
