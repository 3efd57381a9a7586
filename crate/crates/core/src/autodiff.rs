//! Reverse-mode differentiation over `[C, H, W]` tensors.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order with their
//! forward values, and [`Graph::backward`] walks it in reverse. The operator
//! set is closed: every variant of [`Op`] has a forward and a backward rule.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::conv::{conv2d, conv2d_grad_input, conv2d_grad_weight, ConvShape};
use crate::equivariant::{basis_matrix, coefficient_rows, gather_full, scatter_full, GroupBasis};
use crate::error::{Error, Result};
use crate::linop::LinearOperator;
use crate::scalar::Scalar;

pub type NodeId = usize;
pub type Dims = [usize; 3];

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BnMode<T> {
    /// Normalize by the current statistics and record a running-stat update.
    Train,
    /// Normalize by frozen running statistics.
    Eval { mean: Vec<T>, var: Vec<T> },
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    /// Unbiased variance of the batch.
    pub var: Vec<T>,
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Input,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    ScalarMul { s: NodeId, x: NodeId },
    Mul(NodeId, NodeId),
    MaskSelect { x: NodeId, keep: Arc<Vec<bool>> },
    Relu(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Conv { x: NodeId, w: NodeId, shape: ConvShape },
    EqExpand { a: NodeId, b: NodeId, basis: Arc<GroupBasis>, c_out: usize, c_in: usize, group_input: bool },
    ProjectGroup { x: NodeId, n: usize },
    LinOp { x: NodeId, op: Arc<dyn LinearOperator<T>>, adjoint: bool },
    SoftThreshold { x: NodeId, tau: NodeId },
    Sum(NodeId),
    SumAbs(NodeId),
    SumSquares(NodeId),
}

struct Node<T: Scalar> {
    op: Op<T>,
    dims: Dims,
    value: Vec<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn len(d: &Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Gradients of one backward pass, per node and per named parameter.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.nodes.get(id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&id| self.node(id))
    }

    /// Parameter gradients in name order; parameters the loss does not reach are absent.
    pub fn params(&self) -> Vec<(&str, &[T])> {
        self.params
            .iter()
            .filter_map(|(n, &id)| self.node(id).map(|g| (n.as_str(), g)))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.nodes[id].dims
    }

    /// Scalar value of a `[1, 1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id].value[0]
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Graph(format!("node {id} does not exist (graph has {})", self.nodes.len())))
    }

    fn push(&mut self, op: Op<T>, dims: Dims, value: Vec<T>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(len(&dims), value.len());
        self.nodes.push(Node {
            op,
            dims,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn grads_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_dims(&self, a: NodeId, b: NodeId, what: &str) -> Result<Dims> {
        let (da, db) = (self.node(a)?.dims, self.node(b)?.dims);
        if da != db {
            return Err(Error::Graph(format!("{what}: operand dims {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn scalar_node(&self, id: NodeId, what: &str) -> Result<T> {
        let n = self.node(id)?;
        if n.dims != [1, 1, 1] {
            return Err(Error::Graph(format!("{what} must be a scalar node, got dims {:?}", n.dims)));
        }
        Ok(n.value[0])
    }

    pub fn input(&mut self, dims: Dims, data: Vec<T>) -> Result<NodeId> {
        if len(&dims) != data.len() {
            return Err(Error::Graph(format!("input dims {dims:?} vs {} values", data.len())));
        }
        Ok(self.push(Op::Input, dims, data, false))
    }

    pub fn constant_scalar(&mut self, v: T) -> NodeId {
        self.push(Op::Input, [1, 1, 1], vec![v], false)
    }

    /// Registers a named parameter once per graph; later calls return the same node.
    pub fn param(&mut self, name: &str, dims: Dims, data: &[T], trainable: bool) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id].dims != dims {
                return Err(Error::Graph(format!("parameter {name} reused with dims {dims:?}")));
            }
            return Ok(id);
        }
        if len(&dims) != data.len() {
            return Err(Error::Graph(format!("parameter {name}: dims {dims:?} vs {} values", data.len())));
        }
        let id = self.push(Op::Param, dims, data.to_vec(), trainable);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.same_dims(a, b, "add")?;
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(&x, &y)| x + y).collect();
        let rg = self.grads_of(&[a, b]);
        Ok(self.push(Op::Add(a, b), d, v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.same_dims(a, b, "sub")?;
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(&x, &y)| x - y).collect();
        let rg = self.grads_of(&[a, b]);
        Ok(self.push(Op::Sub(a, b), d, v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let d = self.node(a)?.dims;
        let v = self.nodes[a].value.iter().map(|&x| x * c).collect();
        let rg = self.grads_of(&[a]);
        Ok(self.push(Op::Scale(a, c), d, v, rg))
    }

    /// Scalar node times tensor.
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        let sv = self.scalar_node(s, "scalar_mul factor")?;
        let d = self.node(x)?.dims;
        let v = self.nodes[x].value.iter().map(|&e| sv * e).collect();
        let rg = self.grads_of(&[s, x]);
        Ok(self.push(Op::ScalarMul { s, x }, d, v, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.same_dims(a, b, "mul")?;
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(&x, &y)| x * y).collect();
        let rg = self.grads_of(&[a, b]);
        Ok(self.push(Op::Mul(a, b), d, v, rg))
    }

    /// Keeps entries where `keep` is true and writes an exact `+0` elsewhere.
    pub fn mask_select(&mut self, x: NodeId, keep: Arc<Vec<bool>>) -> Result<NodeId> {
        let d = self.node(x)?.dims;
        if keep.len() != len(&d) {
            return Err(Error::Graph(format!("mask of {} entries for dims {d:?}", keep.len())));
        }
        let v = self.nodes[x].value.iter().zip(keep.iter()).map(|(&e, &k)| if k { e } else { T::zero() }).collect();
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::MaskSelect { x, keep }, d, v, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.node(x)?.dims;
        let v = self.nodes[x].value.iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect();
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::Relu(x), d, v, rg))
    }

    /// Batch norm over channel groups: channel `c` owns the `groups` consecutive
    /// slices `c·groups .. (c+1)·groups`, normalized jointly.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mode: BnMode<T>, stat_name: &str) -> Result<NodeId> {
        let d = self.node(x)?.dims;
        if groups == 0 || d[0] % groups != 0 {
            return Err(Error::Graph(format!("batch norm: {} slices not divisible into groups of {groups}", d[0])));
        }
        let channels = d[0] / groups;
        for (id, what) in [(gamma, "gamma"), (beta, "beta")] {
            if len(&self.node(id)?.dims) != channels {
                return Err(Error::Graph(format!("batch norm {what} needs {channels} entries")));
            }
        }
        let block = groups * d[1] * d[2];
        let xv = &self.nodes[x].value;
        let eps = T::lit(BN_EPS);
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let nb = T::from_usize_lossy(block);
                let mut mean = Vec::with_capacity(channels);
                let mut var = Vec::with_capacity(channels);
                let mut unbiased = Vec::with_capacity(channels);
                for c in 0..channels {
                    let s = &xv[c * block..(c + 1) * block];
                    let m = s.iter().copied().sum::<T>() / nb;
                    let ss = s.iter().map(|&e| (e - m) * (e - m)).sum::<T>();
                    mean.push(m);
                    var.push(ss / nb);
                    unbiased.push(if block > 1 { ss / T::from_usize_lossy(block - 1) } else { T::zero() });
                }
                self.bn_updates.push(BnUpdate {
                    name: stat_name.to_string(),
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::Graph(format!("batch norm {stat_name}: running stats need {channels} entries")));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        let mut out = Vec::with_capacity(xv.len());
        for c in 0..channels {
            let (m, is, g, b) = (mean[c], inv_std[c], gv[c], bv[c]);
            out.extend(xv[c * block..(c + 1) * block].iter().map(|&e| g * ((e - m) * is) + b));
        }
        let rg = self.grads_of(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
                train,
            },
            d,
            out,
            rg,
        ))
    }

    /// Same-size cross-correlation with a `c_out × c_in × k × k` weight node.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, k: usize) -> Result<NodeId> {
        let d = self.node(x)?.dims;
        let wl = self.node(w)?.value.len();
        let per_out = d[0] * k * k;
        if per_out == 0 || wl % per_out != 0 {
            return Err(Error::Graph(format!("conv weight of {wl} values does not fit {} inputs and k={k}", d[0])));
        }
        let shape = ConvShape {
            c_in: d[0],
            c_out: wl / per_out,
            height: d[1],
            width: d[2],
            k,
        };
        let v = conv2d(&self.nodes[x].value, &self.nodes[w].value, &shape)?;
        let rg = self.grads_of(&[x, w]);
        Ok(self.push(Op::Conv { x, w, shape }, [shape.c_out, d[1], d[2]], v, rg))
    }

    /// Full convolution weight from Fourier coefficients `a`, `b` (see `equivariant`).
    pub fn eq_expand(&mut self, a: NodeId, b: NodeId, basis: Arc<GroupBasis>, c_out: usize, c_in: usize, group_input: bool) -> Result<NodeId> {
        let (n, p, h) = (basis.n, basis.p(), basis.h());
        let coef = c_out * c_in * if group_input { n } else { 1 } * p * p;
        if self.node(a)?.value.len() != coef || self.node(b)?.value.len() != coef {
            return Err(Error::Graph(format!("equivariant coefficients need {coef} values")));
        }
        let rows = coefficient_rows(&self.nodes[a].value, &self.nodes[b].value, p);
        let nf = coef / (p * p);
        let hh = h * h;
        let per_k: Vec<Vec<T>> = basis
            .orientations
            .iter()
            .map(|o| {
                let mut f = vec![T::zero(); nf * hh];
                T::gemm(nf, 2 * p * p, hh, &rows, false, &basis_matrix::<T>(o), false, &mut f, false);
                f
            })
            .collect();
        let w = scatter_full(&per_k, c_out, c_in, n, group_input, hh);
        let cin_full = if group_input { c_in * n } else { c_in };
        let rg = self.grads_of(&[a, b]);
        Ok(self.push(
            Op::EqExpand {
                a,
                b,
                basis,
                c_out,
                c_in,
                group_input,
            },
            [c_out * n, cin_full, hh],
            w,
            rg,
        ))
    }

    /// Mean over orientation slices: `[C·n, H, W] → [C, H, W]`.
    pub fn project_group(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let d = self.node(x)?.dims;
        if n == 0 || d[0] % n != 0 {
            return Err(Error::Graph(format!("project_group: {} slices, group of {n}", d[0])));
        }
        let c = d[0] / n;
        let hw = d[1] * d[2];
        let inv = T::one() / T::from_usize_lossy(n);
        let xv = &self.nodes[x].value;
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let dst = &mut out[ch * hw..(ch + 1) * hw];
            for k in 0..n {
                for (o, &s) in dst.iter_mut().zip(&xv[(ch * n + k) * hw..][..hw]) {
                    *o += s;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::ProjectGroup { x, n }, [c, d[1], d[2]], out, rg))
    }

    /// Applies `op` (or its adjoint); the backward rule applies the other one.
    pub fn linop(&mut self, x: NodeId, op: Arc<dyn LinearOperator<T>>, adjoint: bool) -> Result<NodeId> {
        let d = self.node(x)?.dims;
        let (from, to) = if adjoint {
            (op.range_shape(), op.domain_shape())
        } else {
            (op.domain_shape(), op.range_shape())
        };
        if d != from {
            return Err(Error::Graph(format!("{}: input dims {d:?}, expected {from:?}", op.name())));
        }
        let v = if adjoint {
            op.apply_adjoint(&self.nodes[x].value)
        } else {
            op.apply(&self.nodes[x].value)
        };
        if v.len() != len(&to) {
            return Err(Error::Graph(format!("{} returned {} values for {to:?}", op.name(), v.len())));
        }
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::LinOp { x, op, adjoint }, to, v, rg))
    }

    /// `sign(x)·max(|x| − τ, 0)` with a scalar threshold node.
    pub fn soft_threshold(&mut self, x: NodeId, tau: NodeId) -> Result<NodeId> {
        let t = self.scalar_node(tau, "soft-threshold level")?;
        let d = self.node(x)?.dims;
        let v = self.nodes[x]
            .value
            .iter()
            .map(|&e| {
                let m = e.abs() - t;
                if m > T::zero() {
                    e.signum() * m
                } else {
                    T::zero()
                }
            })
            .collect();
        let rg = self.grads_of(&[x, tau]);
        Ok(self.push(Op::SoftThreshold { x, tau }, d, v, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.node(x)?;
        let v = self.nodes[x].value.iter().copied().sum();
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::Sum(x), [1, 1, 1], vec![v], rg))
    }

    pub fn sum_abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.node(x)?;
        let v = self.nodes[x].value.iter().map(|e| e.abs()).sum();
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::SumAbs(x), [1, 1, 1], vec![v], rg))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.node(x)?;
        let v = self.nodes[x].value.iter().map(|&e| e * e).sum();
        let rg = self.grads_of(&[x]);
        Ok(self.push(Op::SumSquares(x), [1, 1, 1], vec![v], rg))
    }

    /// Gradients of the scalar node `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.scalar_node(loss, "loss")?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, op: &Op<T>, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |i: NodeId| &self.nodes[i].value;
        let mut acc = |target: NodeId, contrib: Vec<T>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&e| -e).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&e| e * *c).collect()),
            Op::ScalarMul { s, x } => {
                let sv = val(*s)[0];
                if self.nodes[*s].requires_grad {
                    let ds = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum::<T>();
                    acc(*s, vec![ds]);
                }
                acc(*x, g.iter().map(|&e| e * sv).collect());
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.iter().zip(val(*b)).map(|(&e, &v)| e * v).collect());
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, g.iter().zip(val(*a)).map(|(&e, &v)| e * v).collect());
                }
            }
            Op::MaskSelect { x, keep } => {
                acc(*x, g.iter().zip(keep.iter()).map(|(&e, &k)| if k { e } else { T::zero() }).collect());
            }
            Op::Relu(x) => {
                acc(*x, g.iter().zip(val(*x)).map(|(&e, &v)| if v > T::zero() { e } else { T::zero() }).collect());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
                train,
            } => {
                let d = self.nodes[id].dims;
                let channels = d[0] / groups;
                let block = groups * d[1] * d[2];
                let xv = val(*x);
                let gv = val(*gamma);
                let nb = T::from_usize_lossy(block);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for c in 0..channels {
                    let r = c * block..(c + 1) * block;
                    let (m, is) = (mean[c], inv_std[c]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&e, &xi) in g[r.clone()].iter().zip(&xv[r.clone()]) {
                        let xh = (xi - m) * is;
                        sum_g += e;
                        sum_gx += e * xh;
                    }
                    dgamma[c] = sum_gx;
                    dbeta[c] = sum_g;
                    let scale = gv[c] * is;
                    for ((o, &e), &xi) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                        *o = if *train {
                            let xh = (xi - m) * is;
                            scale * (e - sum_g / nb - xh * sum_gx / nb)
                        } else {
                            scale * e
                        };
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Conv { x, w, shape } => {
                if self.nodes[*x].requires_grad {
                    acc(*x, conv2d_grad_input(g, val(*w), shape)?);
                }
                if self.nodes[*w].requires_grad {
                    acc(*w, conv2d_grad_weight(val(*x), g, shape)?);
                }
            }
            Op::EqExpand {
                a,
                b,
                basis,
                c_out,
                c_in,
                group_input,
            } => {
                let (n, p, h) = (basis.n, basis.p(), basis.h());
                let hh = h * h;
                let pp = p * p;
                let per_k = gather_full(g, *c_out, *c_in, n, *group_input, hh);
                let nf = per_k[0].len() / hh;
                let mut drows = vec![T::zero(); nf * 2 * pp];
                for (k, gk) in per_k.iter().enumerate() {
                    let m = basis_matrix::<T>(&basis.orientations[k]);
                    T::gemm(nf, hh, 2 * pp, gk, false, &m, true, &mut drows, true);
                }
                let mut da = Vec::with_capacity(nf * pp);
                let mut db = Vec::with_capacity(nf * pp);
                for row in drows.chunks(2 * pp) {
                    da.extend_from_slice(&row[..pp]);
                    db.extend_from_slice(&row[pp..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::ProjectGroup { x, n } => {
                let d = self.nodes[*x].dims;
                let hw = d[1] * d[2];
                let inv = T::one() / T::from_usize_lossy(*n);
                let mut dx = vec![T::zero(); len(&d)];
                for ch in 0..d[0] / n {
                    let src = &g[ch * hw..(ch + 1) * hw];
                    for k in 0..*n {
                        for (o, &e) in dx[(ch * n + k) * hw..][..hw].iter_mut().zip(src) {
                            *o = e * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LinOp { x, op, adjoint } => {
                let back = if *adjoint { op.apply(g) } else { op.apply_adjoint(g) };
                acc(*x, back);
            }
            Op::SoftThreshold { x, tau } => {
                let t = val(*tau)[0];
                let xv = val(*x);
                if self.nodes[*tau].requires_grad {
                    let dt = g
                        .iter()
                        .zip(xv)
                        .filter(|(_, &v)| v.abs() > t)
                        .map(|(&e, &v)| -e * v.signum())
                        .sum::<T>();
                    acc(*tau, vec![dt]);
                }
                acc(*x, g.iter().zip(xv).map(|(&e, &v)| if v.abs() > t { e } else { T::zero() }).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[*x].value.len()]),
            Op::SumAbs(x) => {
                let s = g[0];
                acc(
                    *x,
                    val(*x)
                        .iter()
                        .map(|&v| {
                            if v > T::zero() {
                                s
                            } else if v < T::zero() {
                                -s
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::SumSquares(x) => {
                let s = g[0] + g[0];
                acc(*x, val(*x).iter().map(|&v| s * v).collect());
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Loss value and the branch pattern of every kinked operator at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub pattern: Vec<bool>,
}

impl Graph<f64> {
    pub fn probe(&self, loss: NodeId) -> Probe {
        Probe {
            loss: self.scalar(loss),
            pattern: self.kink_pattern(),
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Which side of its kink every ReLU, soft-threshold and absolute-value input lies on.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => out.extend(self.nodes[*x].value.iter().map(|&v| v > T::zero())),
                Op::SoftThreshold { x, tau } => {
                    let t = self.nodes[*tau].value[0];
                    for &v in &self.nodes[*x].value {
                        out.push(v > t);
                        out.push(v < -t);
                    }
                }
                Op::SumAbs(x) => out.extend(self.nodes[*x].value.iter().map(|&v| v >= T::zero())),
                _ => {}
            }
        }
        out
    }
}

/// Compares `analytic` gradients against finite differences of `eval`.
///
/// Central differences of step `h` are used where the perturbation keeps every
/// kinked operator on the same branch. Otherwise a second-order one-sided
/// difference on a branch-preserving side is used, shrinking the step when
/// neither side qualifies. The relative error of an entry is
/// `|a − f| / max(|a|, |f|, floor)` with `floor = 1e-6 · max(1, max |a|)`,
/// which keeps entries whose true gradient is zero from dividing by rounding
/// noise.
pub fn finite_difference_check<F>(values: &[Vec<f64>], analytic: &[Vec<f64>], h: f64, eval: F) -> Result<GradCheck>
where
    F: Fn(&[Vec<f64>]) -> Result<Probe>,
{
    let base = eval(values)?;
    let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale.max(1.0);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut vals = values.to_vec();
    for i in 0..vals.len() {
        for j in 0..vals[i].len() {
            let orig = vals[i][j];
            let mut at = |delta: f64| -> Result<Probe> {
                vals[i][j] = orig + delta;
                let p = eval(&vals);
                vals[i][j] = orig;
                p
            };
            let mut fd = None;
            let mut step = h;
            for _ in 0..4 {
                let (p, m) = (at(step)?, at(-step)?);
                if p.pattern == base.pattern && m.pattern == base.pattern {
                    fd = Some((p.loss - m.loss) / (2.0 * step));
                    break;
                }
                if fd.is_none() {
                    fd = Some((p.loss - m.loss) / (2.0 * step));
                }
                let mut one_sided = None;
                for (side, first) in [(1.0, &p), (-1.0, &m)] {
                    if first.pattern != base.pattern {
                        continue;
                    }
                    let second = at(2.0 * side * step)?;
                    if second.pattern == base.pattern {
                        one_sided = Some(side * (4.0 * first.loss - 3.0 * base.loss - second.loss) / (2.0 * step));
                        break;
                    }
                }
                if let Some(v) = one_sided {
                    fd = Some(v);
                    break;
                }
                step *= 0.1;
            }
            let fd = fd.unwrap_or(0.0);
            let a = analytic[i][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > out.max_rel_err || !rel.is_finite() {
                out.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                out.worst = (i, j);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// [`finite_difference_check`] over a graph whose trainable inputs are
/// registered as `p0`, `p1`, … and handed to `build`, which returns the
/// scalar loss node.
pub fn gradient_check<F>(build: F, inputs: &[(Dims, Vec<f64>)], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<(Graph<f64>, NodeId, Vec<NodeId>)> {
        let mut g = Graph::new();
        let ids = inputs
            .iter()
            .zip(vals)
            .enumerate()
            .map(|(i, ((d, _), v))| g.param(&format!("p{i}"), *d, v, true))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &ids)?;
        Ok((g, loss, ids))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (g, loss, ids) = eval(&base)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&base)
        .map(|(&id, v)| grads.node(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();
    finite_difference_check(&base, &analytic, h, |vals| {
        let (g, loss, _) = eval(vals)?;
        Ok(g.probe(loss))
    })
}
