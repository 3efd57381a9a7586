//! Rotation-parameterizable filters from a Fourier-series basis and
//! cyclic-group (pN) equivariant convolutions built from them.
//!
//! A filter bank stores one coefficient set per (output, input[, input
//! orientation]) triple. The filter used for orientation `k` is the same
//! expansion evaluated on the basis sampled at `U_θk⁻¹ x`, `θk = 2πk/N`.

use std::f64::consts::PI;

use rand::Rng;

use crate::conv::{conv2d, ConvShape};
use crate::error::{Error, Result};
use crate::imaging::{rotate_grid_quarter, rotate_image, Image, Interp};
use crate::scalar::{snapped_cos_sin, Scalar};

/// Signed frequency of coefficient index `m` (FFT order, so index 0 is DC).
pub fn frequency(m: usize, p: usize) -> i64 {
    let m = m as i64;
    let p = p as i64;
    if m <= (p - 1) / 2 {
        m
    } else {
        m - p
    }
}

/// Smooth radial cut-off: 1 inside `h/2 − 1/2`, raised-cosine roll-off to 0 at `h/2`.
pub fn radial_mask(rho: f64, h: usize) -> f64 {
    let outer = h as f64 / 2.0;
    let inner = outer - 0.5;
    if rho <= inner {
        1.0
    } else if rho >= outer {
        0.0
    } else {
        0.5 * (1.0 + (PI * (rho - inner) / 0.5).cos())
    }
}

/// `2p²` sampled basis maps of size `h×h`: the `p²` cosine maps followed by the
/// `p²` sine maps, both indexed `m·p + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    pub p: usize,
    pub h: usize,
    pub theta: f64,
    pub maps: Vec<f64>,
}

impl FourierBasis {
    pub fn n_maps(&self) -> usize {
        2 * self.p * self.p
    }

    pub fn map(&self, index: usize) -> &[f64] {
        let hh = self.h * self.h;
        &self.maps[index * hh..(index + 1) * hh]
    }

    pub fn cosine(&self, m: usize, n: usize) -> &[f64] {
        self.map(m * self.p + n)
    }

    pub fn sine(&self, m: usize, n: usize) -> &[f64] {
        self.map(self.p * self.p + m * self.p + n)
    }

    fn rotated_quarter(&self, q: i64) -> Self {
        let hh = self.h * self.h;
        let maps = self
            .maps
            .chunks(hh)
            .flat_map(|m| rotate_grid_quarter(m, self.h, self.h, q))
            .collect();
        Self {
            p: self.p,
            h: self.h,
            theta: self.theta + q as f64 * PI / 2.0,
            maps,
        }
    }
}

/// Samples the basis at `U_θ⁻¹ x` on the `h×h` grid centered at the origin.
pub fn build_basis(p: usize, h: usize, theta: f64) -> Result<FourierBasis> {
    if h % 2 == 0 || h == 0 {
        return Err(Error::InvalidParameter(format!("filter size {h} must be odd")));
    }
    if p == 0 {
        return Err(Error::InvalidParameter("basis order must be at least 1".into()));
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite(format!("basis angle {theta}")));
    }
    let (c, s) = snapped_cos_sin(theta);
    let r = (h / 2) as f64;
    let limit = (p as f64 / 2.0).powi(2);
    let hh = h * h;
    let mut maps = vec![0.0; 2 * p * p * hh];
    for m in 0..p {
        for n in 0..p {
            let (fm, fn_) = (frequency(m, p) as f64, frequency(n, p) as f64);
            if fm * fm + fn_ * fn_ > limit {
                continue;
            }
            for a in 0..h {
                for b in 0..h {
                    let x = b as f64 - r;
                    let y = r - a as f64;
                    let u = c * x - s * y;
                    let v = s * x + c * y;
                    let mask = radial_mask((x * x + y * y).sqrt(), h);
                    let phase = 2.0 * PI * (fm * u + fn_ * v) / h as f64;
                    maps[(m * p + n) * hh + a * h + b] = mask * phase.cos();
                    maps[(p * p + m * p + n) * hh + a * h + b] = mask * phase.sin();
                }
            }
        }
    }
    Ok(FourierBasis { p, h, theta, maps })
}

/// The basis sampled at all `N` orientations `θk = 2πk/N`.
///
/// When `N` is divisible by 4 the orientations past the first quadrant are exact
/// grid rotations of the first-quadrant ones, so quarter-turn equivariance holds
/// to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBasis {
    pub n: usize,
    pub orientations: Vec<FourierBasis>,
}

impl GroupBasis {
    pub fn new(p: usize, h: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("group size must be positive".into()));
        }
        let angle = |k: usize| 2.0 * PI * k as f64 / n as f64;
        let orientations = if n % 4 == 0 {
            let quarter = n / 4;
            let first: Vec<FourierBasis> = (0..quarter).map(|k| build_basis(p, h, angle(k))).collect::<Result<_>>()?;
            (0..n).map(|k| first[k % quarter].rotated_quarter((k / quarter) as i64)).collect()
        } else {
            (0..n).map(|k| build_basis(p, h, angle(k))).collect::<Result<_>>()?
        };
        Ok(Self { n, orientations })
    }

    pub fn p(&self) -> usize {
        self.orientations[0].p
    }

    pub fn h(&self) -> usize {
        self.orientations[0].h
    }

    pub fn n_maps(&self) -> usize {
        self.orientations[0].n_maps()
    }
}

/// Learnable expansion coefficients shared by all orientations.
///
/// `a` and `b` have shape `c_out × c_in × (N if group_input) × p × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqFilterBank<T> {
    pub c_out: usize,
    pub c_in: usize,
    pub n: usize,
    pub p: usize,
    pub group_input: bool,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> EqFilterBank<T> {
    pub fn zeros(c_out: usize, c_in: usize, n: usize, p: usize, group_input: bool) -> Self {
        let len = Self::coef_len(c_out, c_in, n, p, group_input);
        Self {
            c_out,
            c_in,
            n,
            p,
            group_input,
            a: vec![T::zero(); len],
            b: vec![T::zero(); len],
        }
    }

    /// Uniform(±1/√fan_in) coefficients, `fan_in = c_in·(N)·2p²`.
    pub fn random<R: Rng>(c_out: usize, c_in: usize, n: usize, p: usize, group_input: bool, rng: &mut R) -> Self {
        let mut bank = Self::zeros(c_out, c_in, n, p, group_input);
        let bound = 1.0 / (bank.in_slices() as f64 * 2.0 * (p * p) as f64).sqrt();
        for v in bank.a.iter_mut().chain(bank.b.iter_mut()) {
            *v = T::lit(rng.gen_range(-bound..bound));
        }
        bank
    }

    pub fn coef_len(c_out: usize, c_in: usize, n: usize, p: usize, group_input: bool) -> usize {
        c_out * c_in * if group_input { n } else { 1 } * p * p
    }

    /// Input slices per output channel: `c_in` for lifting, `c_in·N` for group input.
    pub fn in_slices(&self) -> usize {
        if self.group_input {
            self.c_in * self.n
        } else {
            self.c_in
        }
    }

    /// Learnable scalars: `2p²·c_out·c_in·(N or 1)`.
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn validate(&self, basis: &GroupBasis) -> Result<()> {
        let len = Self::coef_len(self.c_out, self.c_in, self.n, self.p, self.group_input);
        if self.a.len() != len || self.b.len() != len {
            return Err(Error::ShapeMismatch(format!("bank coefficients need {len} values")));
        }
        if basis.n != self.n || basis.p() != self.p {
            return Err(Error::ShapeMismatch(format!(
                "bank (N={}, p={}) vs basis (N={}, p={})",
                self.n,
                self.p,
                basis.n,
                basis.p()
            )));
        }
        Ok(())
    }

    /// Coefficient rows `[a_f | b_f]`, one per stored filter.
    pub fn coefficient_rows(&self) -> Vec<T> {
        coefficient_rows(&self.a, &self.b, self.p)
    }
}

pub(crate) fn coefficient_rows<T: Scalar>(a: &[T], b: &[T], p: usize) -> Vec<T> {
    let pp = p * p;
    let mut rows = Vec::with_capacity(2 * a.len());
    for (ra, rb) in a.chunks(pp).zip(b.chunks(pp)) {
        rows.extend_from_slice(ra);
        rows.extend_from_slice(rb);
    }
    rows
}

/// Basis matrix of one orientation in the scalar type, `[2p², h²]`.
pub(crate) fn basis_matrix<T: Scalar>(basis: &FourierBasis) -> Vec<T> {
    basis.maps.iter().map(|&v| T::lit(v)).collect()
}

/// Discrete filters of every stored (output, input slice) pair at orientation `k`,
/// shape `c_out × in_slices × h × h`.
pub fn assemble_filter<T: Scalar>(bank: &EqFilterBank<T>, basis: &GroupBasis, k: usize) -> Result<Vec<T>> {
    bank.validate(basis)?;
    if k >= basis.n {
        return Err(Error::OutOfRange(format!("orientation {k} of {}", basis.n)));
    }
    let rows = bank.coefficient_rows();
    let nf = bank.c_out * bank.in_slices();
    let hh = basis.h() * basis.h();
    let mut out = vec![T::zero(); nf * hh];
    T::gemm(nf, basis.n_maps(), hh, &rows, false, &basis_matrix::<T>(&basis.orientations[k]), false, &mut out, false);
    Ok(out)
}

/// Scatters per-orientation filters into one standard convolution weight.
///
/// Lifting: `W[o·N+k, c] = ψk[o, c]`. Group input:
/// `W[o·N+k, c·N+l] = ψk[o, c, (k−l) mod N]`.
pub(crate) fn scatter_full<T: Scalar>(per_k: &[Vec<T>], c_out: usize, c_in: usize, n: usize, group_input: bool, hh: usize) -> Vec<T> {
    let cin_full = if group_input { c_in * n } else { c_in };
    let mut w = vec![T::zero(); c_out * n * cin_full * hh];
    for (k, filters) in per_k.iter().enumerate() {
        for o in 0..c_out {
            for c in 0..c_in {
                if group_input {
                    for l in 0..n {
                        let j = (k + n - l) % n;
                        let src = &filters[((o * c_in + c) * n + j) * hh..][..hh];
                        let dst = ((o * n + k) * cin_full + c * n + l) * hh;
                        w[dst..dst + hh].copy_from_slice(src);
                    }
                } else {
                    let src = &filters[(o * c_in + c) * hh..][..hh];
                    let dst = ((o * n + k) * cin_full + c) * hh;
                    w[dst..dst + hh].copy_from_slice(src);
                }
            }
        }
    }
    w
}

/// Adjoint of [`scatter_full`]: gathers the full-weight gradient back per orientation.
pub(crate) fn gather_full<T: Scalar>(w: &[T], c_out: usize, c_in: usize, n: usize, group_input: bool, hh: usize) -> Vec<Vec<T>> {
    let cin_full = if group_input { c_in * n } else { c_in };
    let slices = if group_input { c_in * n } else { c_in };
    (0..n)
        .map(|k| {
            let mut filters = vec![T::zero(); c_out * slices * hh];
            for o in 0..c_out {
                for c in 0..c_in {
                    if group_input {
                        for l in 0..n {
                            let j = (k + n - l) % n;
                            let dst = ((o * c_in + c) * n + j) * hh;
                            let src = ((o * n + k) * cin_full + c * n + l) * hh;
                            filters[dst..dst + hh].copy_from_slice(&w[src..src + hh]);
                        }
                    } else {
                        let dst = (o * c_in + c) * hh;
                        let src = ((o * n + k) * cin_full + c) * hh;
                        filters[dst..dst + hh].copy_from_slice(&w[src..src + hh]);
                    }
                }
            }
            filters
        })
        .collect()
}

/// Full convolution weight realizing the bank on `basis`.
pub fn expand_weights<T: Scalar>(bank: &EqFilterBank<T>, basis: &GroupBasis) -> Result<Vec<T>> {
    let per_k: Vec<Vec<T>> = (0..basis.n).map(|k| assemble_filter(bank, basis, k)).collect::<Result<_>>()?;
    let hh = basis.h() * basis.h();
    Ok(scatter_full(&per_k, bank.c_out, bank.c_in, bank.n, bank.group_input, hh))
}

/// Feature map on the group: `channels × orientations × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFeature<T> {
    pub channels: usize,
    pub orientations: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> GroupFeature<T> {
    pub fn new(channels: usize, orientations: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * orientations * height * width {
            return Err(Error::ShapeMismatch(format!(
                "group feature {channels}x{orientations}x{height}x{width} from {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("group feature".into()));
        }
        Ok(Self {
            channels,
            orientations,
            height,
            width,
            data,
        })
    }

    pub fn slice(&self, c: usize, k: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[(c * self.orientations + k) * hw..][..hw]
    }

    /// Relabels orientations: output slice `k` is input slice `k − s`.
    pub fn shift_orientations(&self, s: usize) -> Self {
        let n = self.orientations;
        let hw = self.height * self.width;
        let mut data = vec![T::zero(); self.data.len()];
        for c in 0..self.channels {
            for k in 0..n {
                let src = (c * n + (k + n - s % n) % n) * hw;
                data[(c * n + k) * hw..][..hw].copy_from_slice(&self.data[src..src + hw]);
            }
        }
        Self { data, ..self.clone() }
    }

    /// Spatial quarter-turn rotation of every slice.
    pub fn rotate_quarter(&self, q: i64) -> Self {
        let hw = self.height * self.width;
        let data = self
            .data
            .chunks(hw)
            .flat_map(|s| rotate_grid_quarter(s, self.height, self.width, q))
            .collect();
        Self { data, ..self.clone() }
    }
}

/// Plane-to-group convolution: slice `k` correlates the input with the filters at `θk`.
pub fn lift_conv<T: Scalar>(input: &[T], c_in: usize, height: usize, width: usize, bank: &EqFilterBank<T>, basis: &GroupBasis) -> Result<GroupFeature<T>> {
    if bank.group_input {
        return Err(Error::InvalidParameter("lifting needs a bank without input orientations".into()));
    }
    if bank.c_in != c_in || input.len() != c_in * height * width {
        return Err(Error::ShapeMismatch(format!("lift input has {c_in} channels, bank expects {}", bank.c_in)));
    }
    let w = expand_weights(bank, basis)?;
    let shape = ConvShape {
        c_in,
        c_out: bank.c_out * basis.n,
        height,
        width,
        k: basis.h(),
    };
    GroupFeature::new(bank.c_out, basis.n, height, width, conv2d(input, &w, &shape)?)
}

/// Group-to-group convolution: output `k` sums, over input orientations `l`,
/// input slice `l` correlated with filter `(k − l) mod N` rotated to `θk`.
pub fn group_conv<T: Scalar>(f: &GroupFeature<T>, bank: &EqFilterBank<T>, basis: &GroupBasis) -> Result<GroupFeature<T>> {
    if !bank.group_input {
        return Err(Error::InvalidParameter("group convolution needs a bank with input orientations".into()));
    }
    if f.orientations != bank.n {
        return Err(Error::ShapeMismatch(format!("feature has {} orientations, bank {}", f.orientations, bank.n)));
    }
    if f.channels != bank.c_in {
        return Err(Error::ShapeMismatch(format!("feature has {} channels, bank {}", f.channels, bank.c_in)));
    }
    let w = expand_weights(bank, basis)?;
    let shape = ConvShape {
        c_in: f.channels * f.orientations,
        c_out: bank.c_out * basis.n,
        height: f.height,
        width: f.width,
        k: basis.h(),
    };
    GroupFeature::new(bank.c_out, basis.n, f.height, f.width, conv2d(&f.data, &w, &shape)?)
}

/// Mean over the orientation axis, `C × H × W`.
pub fn project_group<T: Scalar>(f: &GroupFeature<T>) -> Vec<T> {
    let hw = f.height * f.width;
    let inv = T::one() / T::from_usize_lossy(f.orientations);
    let mut out = vec![T::zero(); f.channels * hw];
    for c in 0..f.channels {
        let dst = &mut out[c * hw..(c + 1) * hw];
        for k in 0..f.orientations {
            for (d, &s) in dst.iter_mut().zip(f.slice(c, k)) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

/// `‖Φ(Rθ f) − Rθ Φ(f)‖₂ / max(‖Φ(Rθ f)‖₂, ε)` with bilinear rotation.
pub fn equivariance_error<T: Scalar>(map: impl Fn(&Image<T>) -> Result<Image<T>>, input: &Image<T>, theta: f64) -> Result<f64> {
    let rotated_in = rotate_image(input, theta, Interp::Bilinear)?;
    let a = map(&rotated_in)?;
    let b = rotate_image(&map(input)?, theta, Interp::Bilinear)?;
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    let den: f64 = a.data().iter().map(|x| x.as_f64().powi(2)).sum();
    Ok(num.sqrt() / den.sqrt().max(1e-12))
}

#[cfg(test)]
mod tests;
