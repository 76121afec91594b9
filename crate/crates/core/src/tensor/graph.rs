use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, GraphGeom, SpatialGeom, TemporalGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance epsilon of batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Decay of the running statistics: `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    NodeMap { x: Var, m: Var },
    StraightThrough { psi: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Reshape { x: Var },
    Spatial { x: Var, k: Var, bias: Option<Var>, geom: SpatialGeom },
    Temporal { x: Var, k: Var, geom: TemporalGeom },
    GraphConv { x: Var, w: Var, bias: Option<Var>, geom: GraphGeom, neighbors: Arc<Vec<Vec<usize>>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    AvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
    WeightedSum { x: Var, w: Vec<T> },
    Scale { x: Var, s: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Wengert list: values are appended in evaluation order, so walking the
/// list backwards is a reverse topological order visiting each node once.
///
/// A graph built with [`Graph::no_grad`] runs the same kernels but records
/// no backward context.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A named leaf; its gradient shows up in [`Gradients::named`].
    pub fn param(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, Some(name.to_owned()))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.record, name });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], what: &str) -> Result<Var> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::NonFinite(format!("{what} produced a non-finite value at flat index {i}")));
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, name: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a·b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Applies a node-mixing matrix `m: P×N` along the last axis of `x`:
    /// `y[..., p] = Σ_n m[p, n]·x[..., n]`, i.e. `x·mᵀ` per row.
    pub fn node_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [p, n] = self.value(m).as_matrix()?;
        let last = *xs.last().ok_or_else(|| Error::dim("node_map on a scalar"))?;
        if last != n {
            return Err(Error::dim(format!("node_map: input width {last} but transform is {p}×{n}")));
        }
        let rows = self.value(x).numel() / n;
        let mut out = vec![T::zero(); rows * p];
        kernels::gemm_nt(rows, n, p, self.value(x).data(), self.value(m).data(), &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = p;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::NodeMap { x, m }, &[x, m], "node_map")
    }

    /// Forward value is `hard` (same shape as `psi`); the gradient is copied
    /// to `psi` unchanged.
    pub fn straight_through(&mut self, psi: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.shape(psi) {
            return Err(Error::dim(format!(
                "straight-through: hard value {:?} vs assistant {:?}",
                hard.shape(),
                self.shape(psi)
            )));
        }
        self.push(hard, Op::StraightThrough { psi }, &[psi], "straight_through")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Relu { x }, &[x], "relu")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x], "reshape")
    }

    /// Same-padded square convolution on `(B, C_in, H, W)` with kernel
    /// `(C_out, C_in, K, K)` and optional bias `(C_out)`.
    pub fn conv2d_same(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, c, h, w] = xs[..] else {
            return Err(Error::dim(format!("conv2d_same expects (B,C,H,W), got {xs:?}")));
        };
        let x5 = self.reshape(x, &[b, c, 1, h, w])?;
        let y = self.spatial_conv(x5, k, bias)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], h, w])
    }

    /// Same-padded square convolution applied to every frame of a
    /// `(B, C_in, T, H, W)` tensor.
    pub fn spatial_conv(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let [batch, c_in, frames, h, w] = xs[..] else {
            return Err(Error::dim(format!("spatial conv expects (B,C,T,H,W), got {xs:?}")));
        };
        let [c_out, kc, kh, kw] = ks[..] else {
            return Err(Error::dim(format!("spatial kernel must be (C_out,C_in,K,K), got {ks:?}")));
        };
        if kh != kw {
            return Err(Error::config(format!("spatial kernel must be square, got {kh}×{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::config(format!("spatial kernel size must be odd, got {kh}")));
        }
        if kc != c_in {
            return Err(Error::dim(format!("spatial conv: input has {c_in} channels, kernel expects {kc}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::dim(format!("spatial conv bias {:?}, expected [{c_out}]", self.shape(bv))));
            }
        }
        let geom = SpatialGeom { batch, c_in, c_out, frames, h, w, k: kh };
        let out = kernels::spatial_conv_forward(
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let value = Tensor::new(vec![batch, c_out, frames, h, w], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push(value, Op::Spatial { x, k, bias, geom }, &inputs, "spatial_conv")
    }

    /// Zero-padded 1-D convolution along axis 2 of a `(B, C, T, ...)` tensor
    /// with kernel `(C_out, C, Kt)`; output has `ceil(T/stride)` frames.
    pub fn temporal_conv(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::config("temporal stride must be at least 1"));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim(format!("temporal conv expects (B,C,T,...), got {xs:?}")));
        }
        let [c_out, kc, kt] = ks[..] else {
            return Err(Error::dim(format!("temporal kernel must be (C_out,C_in,Kt), got {ks:?}")));
        };
        if kt % 2 == 0 {
            return Err(Error::config(format!("temporal kernel size must be odd, got {kt}")));
        }
        if kc != xs[1] {
            return Err(Error::dim(format!("temporal conv: input has {} channels, kernel expects {kc}", xs[1])));
        }
        let geom = TemporalGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out,
            frames: xs[2],
            sites: xs[3..].iter().product(),
            kt,
            stride,
        };
        let out = kernels::temporal_conv_forward(self.value(x).data(), self.value(k).data(), &geom);
        let mut shape = xs;
        shape[1] = c_out;
        shape[2] = geom.out_frames();
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Temporal { x, k, geom }, &[x, k], "temporal_conv")
    }

    /// Node-specific graph convolution on `(B, C_in, T, N)`.
    ///
    /// `out[b,o,t,i] = bias[o] + Σ_{j ∈ neighbors[i]} Σ_c w[o,i,j,c]·x[b,c,t,j]`
    /// with `w: (C_out, N, N, C_in)`.
    pub fn graph_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        neighbors: Arc<Vec<Vec<usize>>>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, c_in, frames, nodes] = xs[..] else {
            return Err(Error::dim(format!("graph conv expects (B,C,T,N), got {xs:?}")));
        };
        if ws.len() != 4 || ws[1] != nodes || ws[2] != nodes || ws[3] != c_in {
            return Err(Error::dim(format!("graph conv weight {ws:?} incompatible with input {xs:?}")));
        }
        if neighbors.len() != nodes || neighbors.iter().flatten().any(|&j| j >= nodes) {
            return Err(Error::dim("graph conv neighbor lists do not match the node count"));
        }
        let c_out = ws[0];
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::dim(format!("graph conv bias {:?}, expected [{c_out}]", self.shape(bv))));
            }
        }
        let geom = GraphGeom { batch, c_in, c_out, frames, nodes };
        let out = kernels::graph_conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|bv| self.value(bv).data()),
            &neighbors,
            &geom,
        );
        let value = Tensor::new(vec![batch, c_out, frames, nodes], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(value, Op::GraphConv { x, w, bias, geom, neighbors }, &inputs, "graph_conv")
    }

    fn channel_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch norm expects (B,C,...), got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let len = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch norm affine {:?}/{:?}, expected [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((b, c, len))
    }

    /// Training-mode batch normalization over every axis but the channel
    /// axis 1. Returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let (b, c, len) = self.channel_layout(x, gamma, beta)?;
        let n = b * len;
        if n < 2 {
            return Err(Error::Data("batch norm needs at least two values per channel".into()));
        }
        let xv = self.value(x).data();
        let nf = T::lit(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let s: T = (0..b).map(|bi| xv[(bi * c + ch) * len..][..len].iter().copied().sum::<T>()).sum();
            let mu = s / nf;
            let ss: T = (0..b)
                .map(|bi| xv[(bi * c + ch) * len..][..len].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                .sum();
            mean[ch] = mu;
            var[ch] = ss / nf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * nf / T::lit((n - 1) as f64)).collect();
        let y = self.normalize(x, gamma, beta, &mean, inv_std, true, (b, c, len))?;
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let dims = self.channel_layout(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(Error::dim("batch norm running statistics have the wrong length"));
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false, dims)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
        (b, c, len): (usize, usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * len;
                for i in o..o + len {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = if self.record { Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } } else { Op::Leaf };
        self.push(value, op, &[x, gamma, beta], "batch_norm")
    }

    /// Mean over every axis after the channel axis: `(B, C, ...) → (B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim(format!("global_avg_pool expects (B,C,...), got {xs:?}")));
        }
        let len: usize = xs[2..].iter().product();
        let inv = T::lit(1.0 / len as f64);
        let data = self.value(x).data().chunks(len).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        self.push(value, Op::AvgPool { x }, &[x], "global_avg_pool")
    }

    /// `x·wᵀ + b` with `x: (B, C_in)`, `w: (C_out, C_in)`, `b: (C_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [batch, c_in] = self.value(x).as_matrix()?;
        let [c_out, wc] = self.value(w).as_matrix()?;
        if wc != c_in || self.shape(b) != [c_out] {
            return Err(Error::dim(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(batch * c_out);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm_nt(batch, c_in, c_out, self.value(x).data(), self.value(w).data(), &mut out, true);
        let value = Tensor::new(vec![batch, c_out], out)?;
        self.push(value, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    /// Mean softmax cross-entropy of `(B, K)` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [batch, k] = self.value(logits).as_matrix()?;
        if labels.len() != batch {
            return Err(Error::dim(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); batch * k];
        let mut loss = T::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * k..][..k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[bi * k..][..k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss = loss + (z.ln() + max - row[label]);
        }
        let value = Tensor::scalar(loss / T::lit(batch as f64));
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), probs };
        self.push(value, op, &[logits], "softmax_cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(value, Op::Sum { x }, &[x], "sum")
    }

    /// `Σ x ⊙ w` with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        if w.shape() != self.shape(x) {
            return Err(Error::dim(format!("weighted_sum {:?} vs {:?}", self.shape(x), w.shape())));
        }
        let s = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.data().to_vec() }, &[x], "weighted_sum")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * s).collect())?;
        self.push(value, Op::Scale { x, s }, &[x], "scale")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::config("backward on a graph built without gradient recording"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if let Some(i) = dy.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {idx} at flat index {i}")));
            }
            self.backprop(&node.op, &dy, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut names = BTreeMap::new();
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            let t = match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                (Op::Leaf, None) if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            };
            if let (Some(name), true) = (&node.name, t.is_some()) {
                names.insert(name.clone(), Var(i));
            }
            out.push(t);
        }
        Ok(Gradients { grads: out, names })
    }

    fn backprop(&self, op: &Op<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k, n) = (shape(*a)[0], shape(*a)[1], shape(*b)[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, dy, val(*b), &mut da, false);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, val(*a), dy, &mut db, false);
                    accumulate(grads, *b, db);
                }
            }
            Op::NodeMap { x, m } => {
                let (p, n) = (shape(*m)[0], shape(*m)[1]);
                let rows = dy.len() / p;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * n];
                    kernels::gemm_nn(rows, p, n, dy, val(*m), &mut dx, false);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*m) {
                    let mut dm = vec![T::zero(); p * n];
                    kernels::gemm_tn(p, rows, n, dy, val(*x), &mut dm, false);
                    accumulate(grads, *m, dm);
                }
            }
            Op::StraightThrough { psi } => accumulate(grads, *psi, dy.to_vec()),
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Relu { x } => {
                let dx = val(*x).iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, dy.to_vec()),
            Op::Spatial { x, k, bias, geom } => {
                let need = (self.needs(*x), self.needs(*k), bias.is_some_and(|b| self.needs(b)));
                let g = kernels::spatial_conv_backward(val(*x), val(*k), dy, geom, need);
                put(grads, *x, g.dx);
                put(grads, *k, g.dkernel);
                if let Some(b) = bias {
                    put(grads, *b, g.dbias);
                }
            }
            Op::Temporal { x, k, geom } => {
                let (dx, dk) =
                    kernels::temporal_conv_backward(val(*x), val(*k), dy, geom, self.needs(*x), self.needs(*k));
                put(grads, *x, dx);
                put(grads, *k, dk);
            }
            Op::GraphConv { x, w, bias, geom, neighbors } => {
                let need = (self.needs(*x), self.needs(*w), bias.is_some_and(|b| self.needs(b)));
                let g = kernels::graph_conv_backward(val(*x), val(*w), dy, neighbors, geom, need);
                put(grads, *x, g.dx);
                put(grads, *w, g.dkernel);
                if let Some(b) = bias {
                    put(grads, *b, g.dbias);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = shape(*x);
                let (b, c) = (xs[0], xs[1]);
                let len: usize = xs[2..].iter().product();
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * len;
                        for i in o..o + len {
                            dgamma[ch] = dgamma[ch] + dy[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + dy[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let nf = T::lit((b * len) as f64);
                    for ch in 0..c {
                        // Σ dxhat and Σ dxhat·xhat over the channel equal
                        // gamma·dbeta and gamma·dgamma.
                        let (s1, s2) = (gv[ch] * dbeta[ch], gv[ch] * dgamma[ch]);
                        for bi in 0..b {
                            let o = (bi * c + ch) * len;
                            for i in o..o + len {
                                let dxhat = dy[i] * gv[ch];
                                dx[i] = if *batch_stats {
                                    inv_std[ch] / nf * (nf * dxhat - s1 - xhat[i] * s2)
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::AvgPool { x } => {
                let len = self.nodes[x.0].value.numel() / dy.len();
                let inv = T::lit(1.0 / len as f64);
                let dx = dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, len)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (batch, c_in) = (shape(*x)[0], shape(*x)[1]);
                let c_out = shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * c_in];
                    kernels::gemm_nn(batch, c_out, c_in, dy, val(*w), &mut dx, false);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); c_out * c_in];
                    kernels::gemm_tn(c_out, batch, c_in, dy, val(*x), &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); c_out];
                    for row in dy.chunks(c_out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = shape(*logits)[1];
                let scale = dy[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (bi, &l) in labels.iter().enumerate() {
                    d[bi * k + l] = d[bi * k + l] - scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::Sum { x } => accumulate(grads, *x, vec![dy[0]; self.nodes[x.0].value.numel()]),
            Op::WeightedSum { x, w } => accumulate(grads, *x, w.iter().map(|&v| v * dy[0]).collect()),
            Op::Scale { x, s } => accumulate(grads, *x, dy.iter().map(|&g| g * *s).collect()),
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn put<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Option<Vec<T>>) {
    if let Some(d) = delta {
        accumulate(grads, v, d);
    }
}

/// Gradients of every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    names: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of named leaves, sorted by name.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().filter_map(|(n, &v)| self.get(v).map(|g| (n.as_str(), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_average() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]));
        let col = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let y = g.matmul(sel, col).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.5]);

        let bad = g.constant(t(&[3, 1], &[0.0; 3]));
        assert!(matches!(g.matmul(sel, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_all_ones_and_identity_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let zero_bias = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d_same(x, ones, Some(zero_bias)).unwrap();
        assert_eq!(g.value(y).data(), &[10.0; 4]);

        let mut center = Tensor::zeros(&[1, 1, 3, 3]);
        center.set(&[0, 0, 1, 1], 1.0);
        let center = g.constant(center);
        let y = g.conv2d_same(x, center, None).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let even = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(g.conv2d_same(x, even, None), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_identity_and_constant_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 5, 2], |i| i as f64));
        let k1 = g.constant(Tensor::full(&[1, 1, 1], 1.0));
        let y = g.temporal_conv(x, k1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let c = g.constant(Tensor::full(&[1, 1, 5, 1], 2.5));
        let k3 = g.constant(Tensor::full(&[1, 1, 3], 1.0));
        let y = g.temporal_conv(c, k3, 1).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.5, 7.5, 7.5, 5.0]);

        let y = g.temporal_conv(c, k3, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 1]);
        assert!(matches!(g.temporal_conv(c, k3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batch_norm_identities() {
        let mut g = Graph::<f64>::new();
        // Per-channel zero mean, unit (biased) variance.
        let x = g.constant(t(&[2, 2, 2], &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta).unwrap();
        // Only the epsilon separates y from x: |x|·(1 − 1/√(1+ε)) ≤ ε/2.
        assert!(g.value(y).max_abs_diff(g.value(x)) <= BN_EPS / 2.0);
        assert_eq!(stats.mean, vec![0.0, 0.0]);

        let c = g.constant(Tensor::full(&[3, 1, 4], 7.0));
        let gamma1 = g.constant(Tensor::full(&[1], 2.0));
        let beta1 = g.constant(Tensor::full(&[1], 0.25));
        let (y, _) = g.batch_norm_train(c, gamma1, beta1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);

        let logits = g.constant(Tensor::full(&[3, 5], 0.3));
        let l = g.softmax_cross_entropy(logits, &[0, 4, 2]).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(g.softmax_cross_entropy(logits, &[0, 5, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn no_grad_graph_refuses_backward_but_matches_forward() {
        let data = t(&[2, 3], &[0.1, -0.4, 0.3, 1.2, -2.0, 0.5]);
        let run = |mut g: Graph<f64>| {
            let x = g.leaf(data.clone(), true);
            let m = g.leaf(Tensor::from_fn(&[4, 3], |i| (i as f64).sin()), true);
            let y = g.node_map(x, m).unwrap();
            let r = g.relu(y).unwrap();
            let s = g.sum(r).unwrap();
            (g.value(r).clone(), g.backward(s).is_ok())
        };
        let (a, ok_a) = run(Graph::new());
        let (b, ok_b) = run(Graph::no_grad());
        assert_eq!(a, b);
        assert!(ok_a && !ok_b);
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::<f64>::new();
        let psi = g.leaf(t(&[2, 2], &[0.2, 0.7, 0.5, 0.1]), true);
        let phi = g.straight_through(psi, t(&[2, 2], &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let l = g.weighted_sum(phi, &w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(psi).unwrap(), &w);
    }
}
