//! Invariant suites run by `check`: adjoint, equivariance, gradient, descent.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::equivariant::{equivariance_error, group_conv, lift_conv, project_group, EqFilterBank, GroupBasis};
use crate::error::{Error, Result};
use crate::imaging::{disk_window, gaussian_blob, render_phantom, Image, MetalSpec, PhantomSpec};
use crate::nn::{store_gradient_check, Mode, ParamStore, ProxNet};
use crate::projector::{FanBeamGeometry, FanBeamProjector};
use crate::simulate::{sparse_mask, synthesize, CorruptionParams, SampleRecord};
use crate::solver::{stage_objective, Problem, ProxKind, SolverConfig, SolverContext, Unrolled};
use crate::train::{loss, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

/// One measured quantity and the bound it must respect.
#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
}

impl Assertion {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Bound::AtMost(bound),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Bound::AtLeast(bound),
        }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost(b) => self.value <= b,
            Bound::AtLeast(b) => self.value >= b,
        }
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, b) = match self.bound {
            Bound::AtMost(b) => ("<=", b),
            Bound::AtLeast(b) => (">=", b),
        };
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {:.3e} {op} {:.3e}", self.name, self.value, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Adjoint,
    Equivariance,
    Gradient,
    Descent,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Adjoint, Suite::Equivariance, Suite::Gradient, Suite::Descent];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Adjoint => "adjoint",
            Suite::Equivariance => "equivariance",
            Suite::Gradient => "gradient",
            Suite::Descent => "descent",
        }
    }

    pub fn run(self) -> Result<Vec<Assertion>> {
        match self {
            Suite::Adjoint => adjoint_suite(64, 128, 20, 0),
            Suite::Equivariance => equivariance_suite(),
            Suite::Gradient => gradient_suite(1e-5),
            Suite::Descent => descent_suite(5, 10),
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown suite {s:?}")))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `max |⟨Px, y⟩ − ⟨x, Pᵀy⟩| / (‖Px‖‖y‖)` over random pairs on an `n×n` grid.
pub fn adjoint_suite(n: usize, views: usize, pairs: usize, seed: u64) -> Result<Vec<Assertion>> {
    let geom = FanBeamGeometry::standard(n, n, views)?;
    let p = FanBeamProjector::<f64>::new(&geom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..geom.n_bins * geom.n_views).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let px = p.forward_flat(&x);
        let pty = p.back_flat(&y);
        let err = (dot(&px, &y) - dot(&x, &pty)).abs() / (dot(&px, &px).sqrt() * dot(&y, &y).sqrt());
        worst = worst.max(err);
    }
    Ok(vec![Assertion::at_most(format!("adjoint {n}x{n} views={views} pairs={pairs} max rel err"), worst, 1e-10)])
}

fn windowed_blob(n: usize) -> Result<Image<f64>> {
    let blob = gaussian_blob::<f64>(n, n, n as f64 / 8.0, 0.0, 0.0)?;
    let win = disk_window::<f64>(n, n, 0.9)?;
    Image::new(n, n, blob.data().iter().zip(win.data()).map(|(a, b)| a * b).collect())
}

fn windowed_noise(n: usize, seed: u64) -> Result<Image<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let win = disk_window::<f64>(n, n, 0.9)?;
    Image::new(n, n, win.data().iter().map(|w| w * rng.gen_range(-1.0..1.0)).collect())
}

/// Lift, group conv, and orientation mean with random coefficients.
fn layer_stack(n: usize, seed: u64) -> Result<impl Fn(&Image<f64>) -> Result<Image<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = GroupBasis::new(5, 5, n)?;
    let lift = EqFilterBank::<f64>::random(2, 1, n, 5, false, &mut rng);
    let group = EqFilterBank::<f64>::random(1, 2, n, 5, true, &mut rng);
    Ok(move |img: &Image<f64>| {
        let (h, w) = img.shape();
        let f = lift_conv(img.data(), 1, h, w, &lift, &basis)?;
        let g = group_conv(&f, &group, &basis)?;
        Image::new(h, w, project_group(&g))
    })
}

/// Prox net with random coefficients and a residual branch scaled to `exit`.
pub fn perturbed_net(net: &ProxNet, seed: u64, exit: f64) -> Result<ParamStore<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    net.register(&mut store, &mut rng)?;
    randomize_exits(&mut store, &mut rng, exit);
    Ok(store)
}

/// Fills every zero-initialized exit conv with uniform values in `±scale`.
pub fn randomize_exits<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, scale: f64) {
    for e in store.entries_mut() {
        if e.name.ends_with("exit.w") {
            for v in &mut e.value {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}

pub fn net_map<'a>(net: &'a ProxNet, store: &'a ParamStore<f64>) -> impl Fn(&Image<f64>) -> Result<Image<f64>> + 'a {
    move |img: &Image<f64>| {
        let (h, w) = img.shape();
        Image::new(h, w, net.forward(store, h, w, img.data(), Mode::Eval)?)
    }
}

pub fn equivariance_suite() -> Result<Vec<Assertion>> {
    let mut out = Vec::new();
    let noise = windowed_noise(20, 12)?;
    for n in [4usize, 8] {
        let map = layer_stack(n, 11)?;
        let worst = (1..4).map(|q| equivariance_error(&map, &noise, q as f64 * FRAC_PI_2)).collect::<Result<Vec<_>>>()?;
        out.push(Assertion::at_most(format!("p{n} layer stack, quarter turns"), worst.into_iter().fold(0.0, f64::max), 1e-5));
    }
    let map = layer_stack(8, 13)?;
    out.push(Assertion::at_most("p8 layer stack, 45 degrees", equivariance_error(&map, &windowed_blob(33)?, FRAC_PI_4)?, 0.05));
    let net = ProxNet::equivariant("x", 1, 8, 5)?;
    let store = perturbed_net(&net, 5, 0.05)?;
    let x = windowed_blob(48)?;
    let quarter = (1..4).map(|q| equivariance_error(net_map(&net, &store), &x, q as f64 * FRAC_PI_2)).collect::<Result<Vec<_>>>()?;
    out.push(Assertion::at_most("p8 prox net, quarter turns", quarter.into_iter().fold(0.0, f64::max), 1e-5));
    out.push(Assertion::at_most("p8 prox net, 45 degrees", equivariance_error(net_map(&net, &store), &x, FRAC_PI_4)?, 0.05));
    Ok(out)
}

/// A record of a random head phantom with a small metal disk.
pub fn fixture_record(n: usize, views: usize, rate: usize, metal_px: usize, seed: u64) -> Result<(SolverContext<f64>, SampleRecord<f64>)> {
    let geom = FanBeamGeometry::standard(n, n, views)?;
    let ctx = SolverContext::new(&geom, &SolverConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = PhantomSpec::random_head(&mut rng);
    let x_gt = render_phantom::<f64>(&phantom, n, n)?;
    let metal = MetalSpec::disk(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), metal_px).render(n, n)?;
    let d = sparse_mask(geom.n_bins, geom.n_views, rate)?;
    let params = CorruptionParams { seed, ..Default::default() };
    let rec = synthesize(&x_gt, &metal, &ctx.projector, &params, &d)?;
    Ok((ctx, rec))
}

/// Gradient check of the full training loss of a `stages`-stage solver at 16×16.
pub fn solver_gradient_check(kind: ProxKind, stages: usize, h: f64, seed: u64) -> Result<Assertion> {
    let cfg = SolverConfig {
        stages,
        prox: kind,
        width: 4,
        eq_channels: 1,
        group: 4,
        p: 5,
        ..Default::default()
    };
    let (ctx, rec) = fixture_record(16, 32, 2, 4, seed)?;
    let prob = Problem::new(&ctx, &cfg, &rec.y_svma, &rec.tr, &rec.d)?;
    let model = Unrolled::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = model.init_store::<f64, _>(&mut rng)?;
    randomize_exits(&mut store, &mut rng, 0.1);
    let lc = LossConfig::default();
    let check = store_gradient_check(&store, h, |g: &mut Graph<f64>, s| {
        let nodes = model.unroll(g, &ctx, &prob, s, Mode::Train)?;
        loss(g, &nodes, rec.x_gt.data(), rec.y_gt.data(), &lc)
    })?;
    Ok(Assertion::at_most(
        format!("{} K={stages} 16x16, {} params, max FD rel err", crate::eval::prox_name(kind), check.checked),
        check.max_rel_err,
        1e-4,
    ))
}

pub fn gradient_suite(h: f64) -> Result<Vec<Assertion>> {
    [ProxKind::LearnedStandard, ProxKind::LearnedEquivariant]
        .into_iter()
        .map(|k| solver_gradient_check(k, 2, h, 3))
        .collect()
}

/// Largest stage-to-stage objective increase of identity-prox runs on `fixtures` records.
pub fn descent_suite(fixtures: usize, stages: usize) -> Result<Vec<Assertion>> {
    let cfg = SolverConfig { stages, ..Default::default() };
    let model = Unrolled::new(&cfg)?;
    let store = model.default_store()?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..fixtures {
        let (ctx, rec) = fixture_record(32, 64, 1 << (i % 3), 5 + 4 * i, 100 + i as u64)?;
        let prob = Problem::new(&ctx, &cfg, &rec.y_svma, &rec.tr, &rec.d)?;
        let st = model.run(&ctx, &prob, &store)?;
        let mut last = stage_objective(&ctx, &prob, &st, &store, &cfg, 0)?;
        for k in 1..=stages {
            let v = stage_objective(&ctx, &prob, &st, &store, &cfg, k)?;
            worst = worst.max(v - last);
            last = v;
        }
    }
    Ok(vec![Assertion::at_most(format!("identity prox, {fixtures} fixtures, K={stages}: max objective increase"), worst, 1e-9)])
}
