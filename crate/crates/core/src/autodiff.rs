//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Inputs
//! always precede the node that consumes them, so the tape order is a
//! topological order and the backward pass is a single reverse sweep.
//! Trainable parameters are not copied into the tape: parameter nodes borrow
//! their values from a [`ParamStore`], and their gradients are collected
//! per [`ParamId`] for [`Gradients::accumulate`](crate::params::Gradients::accumulate).
//!
//! Gradients accumulate. Calling [`Graph::backward`] twice without
//! [`Graph::zero_grad`] doubles every leaf and parameter gradient.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Scale of the SELU activation.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Negative-side saturation of the SELU activation.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
/// Probability clamp used by [`Graph::bce_loss`].
pub const BCE_EPSILON: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Whether dropout is active, and the generator its masks are drawn from.
pub enum Mode<'r> {
    Inference,
    Training(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Training(_))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Selu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    /// `None` for parameter nodes, whose values live in the parameter store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient of a gradient-requiring leaf.
    grad: Option<Vec<f64>>,
}

/// Recording of a forward computation.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    param_grads: Vec<Option<Vec<f64>>>,
    selu_fault: Option<f64>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without trainable parameters.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            param_grads: Vec::new(),
            selu_fault: None,
        }
    }

    /// A graph whose parameter nodes read from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            param_grads: vec![None; params.len()],
            selu_fault: None,
        }
    }

    /// Scales every SELU backward rule of this graph by `factor`, making its
    /// gradients wrong on purpose. Used as the negative control of gradient
    /// checking.
    #[doc(hidden)]
    pub fn corrupt_selu_backward(&mut self, factor: f64) {
        self.selu_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Signs of every SELU input recorded so far, packed 64 per word. Two
    /// forward passes with equal patterns lie on the same smooth piece of
    /// the network.
    pub fn selu_sign_pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut n = 0usize;
        for node in &self.nodes {
            if let Op::Selu(a) = node.op {
                for &x in self.value(a).data() {
                    if n.is_multiple_of(64) {
                        bits.push(0u64);
                    }
                    if x > 0.0 {
                        *bits.last_mut().expect("pushed above") |= 1 << (n % 64);
                    }
                    n += 1;
                }
            }
        }
        bits
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("parameter node without a parameter store")
                .get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// A gradient-requiring input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Gradient accumulated for `v`, if it is a leaf or parameter that has
    /// received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.param_grads[id.0].as_deref(),
            _ => self.nodes[v.0].grad.as_deref(),
        }
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.param_grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        for g in &mut self.param_grads {
            *g = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// Elementwise sum. `b` may also have the shape of `a` without its
    /// leading dimension, in which case it is broadcast over that dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if !ta.shape().is_empty() && &ta.shape()[1..] == tb.shape() {
            true
        } else {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        };
        let mut out = ta.clone();
        let n = tb.numel();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += tb.data()[if broadcast { i % n } else { i }];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b, broadcast }, rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Matrix product of a `[m, k]` and a `[k, n]` tensor.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                alloc::format!("expected 2-D, got {:?}", s),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor::new(vec![c, r], transpose_data(ta.data(), r, c))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds the constant `c` to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                alloc::format!("axis {} out of range for {:?}", axis, base),
            ));
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Collapses to one dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.reshape(a, &[n])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, n, inner) = axis_split(t.shape(), axis, "softmax")?;
        let mut out = t.data().to_vec();
        if inner == 1 {
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = math::exp(*v - max);
                    total += *v;
                }
                let inv = 1.0 / total;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let max = (0..n).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..n {
                        let e = math::exp(out[at(k)] - max);
                        out[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        out[at(k)] /= total;
                    }
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { x: a, axis }, rg))
    }

    /// Normalizes along the last axis to zero mean and unit population
    /// variance, then applies the per-position `gain` and `offset`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, offset: Var, epsilon: f64) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        let (g, b) = (self.value(gain), self.value(offset));
        if g.shape() != [n] {
            return Err(Error::shape("layer_norm", t.shape(), g.shape()));
        }
        if b.shape() != [n] {
            return Err(Error::shape("layer_norm", t.shape(), b.shape()));
        }
        let rows = t.numel() / n;
        let mut normalized = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let x = &t.data()[r * n..(r + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + epsilon);
            inv_std[r] = is;
            for j in 0..n {
                let xh = (x[j] - mean) * is;
                normalized[r * n + j] = xh;
                out[r * n + j] = g.data()[j] * xh + b.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(offset);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: a,
                gain,
                offset,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(selu);
        let rg = self.rg(a);
        self.push(out, Op::Selu(a), rg)
    }

    /// Logistic function. Outputs are kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Inverted dropout: during training each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training, or with `rate == 0`, returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                alloc::format!("rate {} outside [0, 1)", rate),
            ));
        }
        let rng = match mode {
            Mode::Training(rng) if rate > 0.0 => rng,
            _ => return Ok(a),
        };
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { x: a, mask }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    /// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]`.
    pub fn bce_loss(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() {
            return Err(Error::shape("bce_loss", t.shape(), &[targets.len()]));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("bce_loss", "targets must be 0 or 1"));
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                -(y * math::ln(p) + (1.0 - y) * math::ln(1.0 - p))
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss`/d(node) to every gradient-requiring leaf and
    /// parameter reachable from `loss`, adding to previously held gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// As [`Graph::backward`] for the loss `seed * loss`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match self.nodes[idx].op {
                Op::Leaf => accumulate(&mut self.nodes[idx].grad, &up),
                Op::Param(id) => accumulate(&mut self.param_grads[id.0], &up),
                _ => self.propagate(idx, &up, &mut grads),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn send_owned(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.as_ref().expect("op node value");
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add { a, b, broadcast } => {
                self.send(grads, *a, up);
                if self.rg(*b) {
                    if *broadcast {
                        let n = self.value(*b).numel();
                        let mut gb = vec![0.0; n];
                        for (i, g) in up.iter().enumerate() {
                            gb[i % n] += g;
                        }
                        self.send_owned(grads, *b, gb);
                    } else {
                        self.send(grads, *b, up);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = up.iter().zip(tb.data()).map(|(u, y)| u * y).collect();
                    self.send_owned(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = up.iter().zip(ta.data()).map(|(u, x)| u * x).collect();
                    self.send_owned(grads, *b, g);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.rg(*a) {
                    // dA = dC Bᵀ
                    let bt = transpose_data(tb.data(), k, n);
                    self.send_owned(grads, *a, gemm(up, &bt, m, n, k));
                }
                if self.rg(*b) {
                    // dB = Aᵀ dC
                    let at = transpose_data(ta.data(), m, k);
                    self.send_owned(grads, *b, gemm(&at, up, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.send_owned(grads, *a, transpose_data(up, r, c));
            }
            Op::Scale(a, c) => {
                let g = up.iter().map(|u| u * c).collect();
                self.send_owned(grads, *a, g);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.send(grads, *a, up),
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * row + offset;
                            g.extend_from_slice(&up[start..start + block]);
                        }
                        self.send_owned(grads, p, g);
                    }
                    offset += block;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send_owned(grads, *a, vec![up[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send_owned(grads, *a, vec![up[0] / n as f64; n]);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) =
                    axis_split(out.shape(), *axis, "softmax").expect("validated in forward");
                let y = out.data();
                let mut g = vec![0.0; y.len()];
                if inner == 1 {
                    for ((gr, yr), ur) in g
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(up.chunks_exact(n))
                    {
                        let s = dot(ur, yr);
                        for ((gi, yi), ui) in gr.iter_mut().zip(yr).zip(ur) {
                            *gi = yi * (ui - s);
                        }
                    }
                    self.send_owned(grads, *x, g);
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let s: f64 = (0..n).map(|k| up[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            g[at(k)] = y[at(k)] * (up[at(k)] - s);
                        }
                    }
                }
                self.send_owned(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let g = self.value(*gain).data();
                let n = g.len();
                let rows = inv_std.len();
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * rows];
                    for r in 0..rows {
                        let xh = &normalized[r * n..(r + 1) * n];
                        let u = &up[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = u[j] * g[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = u[j] * g[j];
                            gx[r * n + j] = inv_std[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.send_owned(grads, *x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = vec![0.0; n];
                    for (i, (u, xh)) in up.iter().zip(normalized).enumerate() {
                        gg[i % n] += u * xh;
                    }
                    self.send_owned(grads, *gain, gg);
                }
                if self.rg(*offset) {
                    let mut gb = vec![0.0; n];
                    for (i, u) in up.iter().enumerate() {
                        gb[i % n] += u;
                    }
                    self.send_owned(grads, *offset, gb);
                }
            }
            Op::Selu(a) => {
                let x = self.value(*a).data();
                let g = up
                    .iter()
                    .zip(x)
                    .map(|(u, &x)| u * selu_derivative(x) * self.selu_fault.unwrap_or(1.0))
                    .collect();
                self.send_owned(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = up
                    .iter()
                    .zip(out.data())
                    .map(|(u, y)| u * y * (1.0 - y))
                    .collect();
                self.send_owned(grads, *a, g);
            }
            Op::Dropout { x, mask } => {
                let g = up.iter().zip(mask).map(|(u, m)| u * m).collect();
                self.send_owned(grads, *x, g);
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let g = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
                            return 0.0;
                        }
                        up[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                    })
                    .collect();
                self.send_owned(grads, *p, g);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
        None => *slot = Some(g.to_vec()),
    }
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            alloc::format!("axis {} out of range for {:?}", axis, shape),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-major `a: [m, k]` times `b: [k, n]`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n >= 16 {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip != 0.0 {
                    axpy(aip, &b[p * n..(p + 1) * n], orow);
                }
            }
        }
    } else {
        // narrow output: contiguous dots against the columns of b
        let bt = transpose_data(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
    }
    out
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * math::expm1(x)
    }
}

fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * math::exp(x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
