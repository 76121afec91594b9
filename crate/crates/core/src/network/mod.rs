//! The grid convolution network and the node-specific graph convolution
//! baseline. Both share every module except the spatial operator.

mod model;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use model::Model;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var, BN_MOMENTUM};
use crate::transform::GridSize;

/// Whether batch norm uses batch statistics (and updates its running
/// buffers) and whether the index transforms re-derive their assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Grid patch + regular 2-D convolution.
    Ske2grid,
    /// Node-specific graph convolution on the raw skeleton.
    GcnBaseline,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ske2grid" => Ok(ModelKind::Ske2grid),
            "gcn-baseline" => Ok(ModelKind::GcnBaseline),
            other => Err(Error::config(format!("unknown model kind `{other}` (expected ske2grid or gcn-baseline)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ske2grid => "ske2grid",
            ModelKind::GcnBaseline => "gcn-baseline",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Six blocks, 64→256 channels.
    Full,
    /// Four blocks, 16→32 channels.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::config(format!("unknown model preset `{other}` (expected full or desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub residual: bool,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, temporal_stride: usize, residual: bool) -> Self {
        BlockConfig { in_channels, out_channels, spatial_kernel: 3, temporal_kernel: 9, temporal_stride, residual }
    }

    /// Residual needs a 1×1 projection when the shape changes.
    pub fn projects(&self) -> bool {
        self.residual && (self.in_channels != self.out_channels || self.temporal_stride != 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub blocks: Vec<BlockConfig>,
    /// Spatial layout seen by the blocks; the baseline uses `1×N`.
    pub grid: GridSize,
    pub n_classes: usize,
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn preset(preset: Preset, kind: ModelKind, grid: GridSize, n_classes: usize) -> Self {
        let (channels, strided): (&[usize], &[usize]) = match preset {
            Preset::Full => (&[64, 64, 128, 128, 256, 256], &[3, 5]),
            Preset::Desk => (&[16, 16, 32, 32], &[3]),
        };
        Self::from_channels(kind, grid, n_classes, channels, strided)
    }

    /// Blocks with the given output widths; 1-based block numbers in
    /// `strided` use temporal stride 2. The first block has no residual.
    pub fn from_channels(
        kind: ModelKind,
        grid: GridSize,
        n_classes: usize,
        channels: &[usize],
        strided: &[usize],
    ) -> Self {
        let mut c_in = crate::skeleton::CHANNELS;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if strided.contains(&(i + 1)) { 2 } else { 1 };
                let b = BlockConfig::new(c_in, c, stride, i > 0);
                c_in = c;
                b
            })
            .collect();
        ModelConfig { kind, blocks, grid, n_classes, in_channels: crate::skeleton::CHANNELS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("model needs at least one block"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let k = i + 1;
            if b.in_channels != c {
                return Err(Error::config(format!(
                    "block {k} expects {} input channels but receives {c}",
                    b.in_channels
                )));
            }
            if b.out_channels == 0 {
                return Err(Error::config(format!("block {k} has no output channels")));
            }
            if b.spatial_kernel % 2 == 0 || b.temporal_kernel % 2 == 0 {
                return Err(Error::config(format!("block {k} kernel sizes must be odd")));
            }
            if !(1..=2).contains(&b.temporal_stride) {
                return Err(Error::config(format!("block {k} temporal stride must be 1 or 2")));
            }
            c = b.out_channels;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }
}

/// Role of a named network tensor.
fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn block_name(k: usize, part: &str, field: &str) -> String {
    format!("block{}.{part}.{field}", k + 1)
}

/// Convolution stack with named parameters and batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    cfg: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
    /// Neighbor lists of the baseline's graph convolution.
    neighbors: Option<Arc<Vec<Vec<usize>>>>,
}

impl<T: Scalar> Network<T> {
    /// Grid network with He-normal convolution weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.kind != ModelKind::Ske2grid {
            return Err(Error::config("graph baseline needs neighbor lists; use Network::baseline"));
        }
        Self::build(cfg, None, seed)
    }

    /// Baseline network; `neighbors[i]` is the receptive set of node `i`.
    pub fn baseline(cfg: ModelConfig, neighbors: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if cfg.kind != ModelKind::GcnBaseline {
            return Err(Error::config("Network::baseline needs a gcn-baseline config"));
        }
        let n = cfg.grid.cells();
        if neighbors.len() != n || neighbors.iter().flatten().any(|&j| j >= n) {
            return Err(Error::config(format!("neighbor lists do not describe a {n}-node graph")));
        }
        Self::build(cfg, Some(Arc::new(neighbors)), seed)
    }

    fn build(cfg: ModelConfig, neighbors: Option<Arc<Vec<Vec<usize>>>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let n = cfg.grid.cells();
        for (k, b) in cfg.blocks.iter().enumerate() {
            let (ci, co) = (b.in_channels, b.out_channels);
            let spatial = match &neighbors {
                None => he_normal(&[co, ci, b.spatial_kernel, b.spatial_kernel], ci * b.spatial_kernel.pow(2), &mut rng),
                Some(nb) => {
                    let fan = ci * nb.iter().map(Vec::len).max().unwrap_or(1).max(1);
                    let mut w = he_normal::<T>(&[co, n, n, ci], fan, &mut rng);
                    mask_graph_weight(&mut w, nb);
                    w
                }
            };
            tensors.insert(block_name(k, "spatial", "weight"), spatial);
            tensors.insert(block_name(k, "spatial", "bias"), Tensor::zeros(&[co]));
            tensors.insert(
                block_name(k, "temporal", "weight"),
                he_normal(&[co, co, b.temporal_kernel], co * b.temporal_kernel, &mut rng),
            );
            for bn in ["bn1", "bn2"] {
                tensors.insert(block_name(k, bn, "gamma"), Tensor::full(&[co], T::one()));
                tensors.insert(block_name(k, bn, "beta"), Tensor::zeros(&[co]));
                tensors.insert(block_name(k, bn, "running_mean"), Tensor::zeros(&[co]));
                tensors.insert(block_name(k, bn, "running_var"), Tensor::full(&[co], T::one()));
            }
            if b.projects() {
                tensors.insert(block_name(k, "residual", "weight"), he_normal(&[co, ci, 1], ci, &mut rng));
            }
        }
        let c = cfg.out_channels();
        let bound = 1.0 / (c as f64).sqrt();
        let head = Tensor::from_fn(&[cfg.n_classes, c], |_| T::lit(rng.random_range(-bound..bound)));
        tensors.insert("head.weight".into(), head);
        tensors.insert("head.bias".into(), Tensor::zeros(&[cfg.n_classes]));
        Ok(Network { cfg, tensors, neighbors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn neighbors(&self) -> Option<&[Vec<usize>]> {
        self.neighbors.as_deref().map(Vec::as_slice)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Every tensor (parameters and buffers), sorted by name.
    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// Names of trainable parameters, sorted.
    pub fn parameter_names(&self) -> Vec<&str> {
        self.tensors.keys().map(String::as_str).filter(|n| !is_buffer(n)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.tensors.iter_mut().filter(|(n, _)| !is_buffer(n)).map(|(n, t)| (n.clone(), t)).collect()
    }

    /// Replaces a tensor by name. Returns `false` for unknown names.
    pub fn load_tensor(&mut self, name: &str, t: &Tensor<T>) -> Result<bool> {
        let Some(dst) = self.tensors.get_mut(name) else { return Ok(false) };
        if dst.shape() != t.shape() {
            return Err(Error::Load(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), dst.shape())));
        }
        *dst = t.clone();
        if let Some(nb) = &self.neighbors {
            if name.ends_with(".spatial.weight") {
                mask_graph_weight(dst, nb);
            }
        }
        Ok(true)
    }

    fn leaf(&self, g: &mut Graph<T>, name: &str) -> Var {
        g.param(name, self.tensors[name].clone(), true)
    }

    /// Runs the blocks, pooling and classifier. Input is `(B, C, T, H, W)`
    /// for the grid network and `(B, C, T, N)` for the baseline; output is
    /// `(B, n_classes)` logits. Training mode folds the batch statistics
    /// into the running buffers.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let grid = self.cfg.grid;
        let expect_spatial: Vec<usize> = match self.neighbors {
            None => vec![grid.h, grid.w],
            Some(_) => vec![grid.cells()],
        };
        if xs.len() != 3 + expect_spatial.len() || xs[1] != self.cfg.in_channels || xs[3..] != expect_spatial[..] {
            return Err(Error::dim(format!(
                "network expects (B, {}, T, {}), got {xs:?}",
                self.cfg.in_channels,
                expect_spatial.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        let mut h = x;
        for k in 0..self.cfg.blocks.len() {
            h = self.block_forward(g, k, h, mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let w = self.leaf(g, "head.weight");
        let b = self.leaf(g, "head.bias");
        g.linear(pooled, w, b)
    }

    /// One block: spatial op → bn → relu → temporal conv → bn → + residual → relu.
    pub fn block_forward(&mut self, g: &mut Graph<T>, k: usize, x: Var, mode: Mode) -> Result<Var> {
        let b = self.cfg.blocks[k];
        let w = self.leaf(g, &block_name(k, "spatial", "weight"));
        let bias = self.leaf(g, &block_name(k, "spatial", "bias"));
        let h = match &self.neighbors {
            None => g.spatial_conv(x, w, Some(bias))?,
            Some(nb) => g.graph_conv(x, w, Some(bias), nb.clone())?,
        };
        let h = self.norm(g, k, "bn1", h, mode)?;
        let h = g.relu(h)?;
        let kt = self.leaf(g, &block_name(k, "temporal", "weight"));
        let h = g.temporal_conv(h, kt, b.temporal_stride)?;
        let mut h = self.norm(g, k, "bn2", h, mode)?;
        if b.residual {
            let r = if b.projects() {
                let pw = self.leaf(g, &block_name(k, "residual", "weight"));
                g.temporal_conv(x, pw, b.temporal_stride)?
            } else {
                x
            };
            h = g.add(h, r)?;
        }
        g.relu(h)
    }

    fn norm(&mut self, g: &mut Graph<T>, k: usize, bn: &str, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.leaf(g, &block_name(k, bn, "gamma"));
        let beta = self.leaf(g, &block_name(k, bn, "beta"));
        let mean_name = block_name(k, bn, "running_mean");
        let var_name = block_name(k, bn, "running_var");
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
                let m = T::lit(BN_MOMENTUM);
                let one_m = T::one() - m;
                for (name, batch) in [(&mean_name, &stats.mean), (&var_name, &stats.var)] {
                    let run = self.tensors.get_mut(name).expect("buffer exists");
                    for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                        *r = m * *r + one_m * b;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.tensors[&mean_name].data().to_vec();
                let var = self.tensors[&var_name].data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var)
            }
        }
    }
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Zeroes the `(o, i, j, c)` entries with `j` outside the neighbors of `i`.
fn mask_graph_weight<T: Scalar>(w: &mut Tensor<T>, neighbors: &[Vec<usize>]) {
    let [co, n, _, ci] = w.shape()[..] else { return };
    let data = w.data_mut();
    for o in 0..co {
        for (i, nb) in neighbors.iter().enumerate().take(n) {
            for j in 0..n {
                if !nb.contains(&j) {
                    let at = ((o * n + i) * n + j) * ci;
                    data[at..at + ci].fill(T::zero());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny(kind: ModelKind, grid: GridSize) -> ModelConfig {
        let mut cfg = ModelConfig::from_channels(kind, grid, 3, &[4, 6], &[2]);
        for b in &mut cfg.blocks {
            b.temporal_kernel = 3;
        }
        cfg
    }

    #[test]
    fn presets_chain_channels() {
        let full = ModelConfig::preset(Preset::Full, ModelKind::Ske2grid, GridSize::new(5, 5), 60);
        full.validate().unwrap();
        let strides: Vec<usize> = full.blocks.iter().map(|b| b.temporal_stride).collect();
        assert_eq!(strides, vec![1, 1, 2, 1, 2, 1]);
        assert!(!full.blocks[0].residual && full.blocks[1].residual && !full.blocks[1].projects());
        assert!(full.blocks[2].projects());
        let desk = ModelConfig::preset(Preset::Desk, ModelKind::Ske2grid, GridSize::new(5, 5), 5);
        assert_eq!(desk.out_channels(), 32);

        let mut bad = desk.clone();
        bad.blocks[2].in_channels = 8;
        assert!(bad.validate().unwrap_err().to_string().contains("block 3"));
    }

    #[test]
    fn identity_block_is_relu() {
        let cfg = ModelConfig {
            kind: ModelKind::Ske2grid,
            blocks: vec![BlockConfig::new(2, 2, 1, false)],
            grid: GridSize::new(2, 3),
            n_classes: 2,
            in_channels: 2,
        };
        let mut net = Network::<f64>::new(cfg, 0).unwrap();
        let center = |co, ci, k: usize| {
            Tensor::from_fn(&[co, ci, k, k], |i| {
                let (o, rest) = (i / (ci * k * k), i % (ci * k * k));
                let (c, p) = (rest / (k * k), rest % (k * k));
                if o == c && p == k * k / 2 {
                    1.0
                } else {
                    0.0
                }
            })
        };
        net.load_tensor("block1.spatial.weight", &center(2, 2, 3)).unwrap();
        let kt = Tensor::from_fn(&[2, 2, 9], |i| if i / 18 == (i % 18) / 9 && i % 9 == 4 { 1.0 } else { 0.0 });
        net.load_tensor("block1.temporal.weight", &kt).unwrap();
        let x = Tensor::from_fn(&[1, 2, 4, 2, 3], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = net.block_forward(&mut g, 0, xv, Mode::Eval).unwrap();
        assert_eq!(g.shape(y), x.shape());
        let scale = 1.0 / (1.0 + crate::tensor::BN_EPS).sqrt();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            // Two eval-mode norms with unit running variance shrink by (1+eps)^-1/2 each.
            assert!((a - b.max(0.0) * scale * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_halves_frames_and_output_shape() {
        let mut net = Network::<f64>::new(tiny(ModelKind::Ske2grid, GridSize::new(2, 2)), 1).unwrap();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::from_fn(&[2, 3, 5, 2, 2], |i| (i as f64).cos()));
        let h = net.block_forward(&mut g, 0, x, Mode::Train).unwrap();
        let h = net.block_forward(&mut g, 1, h, Mode::Train).unwrap();
        assert_eq!(g.shape(h), &[2, 6, 3, 2, 2]);
        let logits = net.forward(&mut g, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(logits), &[2, 3]);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut net = Network::<f64>::new(tiny(ModelKind::Ske2grid, GridSize::new(2, 2)), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 2, 2], |i| (i as f64).sin() + 3.0));
        net.forward(&mut g, x, Mode::Train).unwrap();
        assert!(net.get("block1.bn1.running_mean").unwrap().data().iter().any(|&v| v != 0.0));
        let before = net.clone();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 2, 2], |i| (i as f64).sin()));
        net.forward(&mut g, x, Mode::Eval).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn block_gradcheck() {
        let cfg = tiny(ModelKind::Ske2grid, GridSize::new(2, 2));
        let net = Network::<f64>::new(cfg, 3).unwrap();
        let x = Tensor::from_fn(&[2, 3, 3, 2, 2], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        let w = Tensor::from_fn(&[2, 4, 3, 2, 2], |i| ((i * 5 % 13) as f64 - 6.0) / 6.0);
        let report = grad_check(
            |g, xv| {
                let y = net.clone().block_forward(g, 0, xv, Mode::Train)?;
                g.weighted_sum(y, &w)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn baseline_differs_only_in_spatial_weights() {
        let grid = GridSize::new(3, 3);
        let s = Network::<f64>::new(tiny(ModelKind::Ske2grid, grid), 0).unwrap();
        let nb: Vec<Vec<usize>> = (0..9).map(|i| vec![i, (i + 1) % 9]).collect();
        let b = Network::<f64>::baseline(tiny(ModelKind::GcnBaseline, GridSize::new(1, 9)), nb, 0).unwrap();
        assert_eq!(s.parameter_names(), b.parameter_names());
        for name in s.parameter_names() {
            let same = s.get(name).unwrap().shape() == b.get(name).unwrap().shape();
            assert_eq!(same, !name.ends_with(".spatial.weight"), "{name}");
        }
        assert_eq!(b.get("block1.spatial.weight").unwrap().shape(), &[4, 9, 9, 3]);
        let w = b.get("block1.spatial.weight").unwrap();
        assert_eq!(w.at(&[0, 0, 5, 0]), 0.0);
        assert_ne!(w.at(&[0, 0, 1, 0]), 0.0);
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let cfg = ModelConfig::preset(Preset::Desk, ModelKind::Ske2grid, GridSize::new(5, 5), 5);
        let a = Network::<f32>::new(cfg.clone(), 1).unwrap();
        let b = Network::<f32>::new(cfg, 2).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        // block1: 16·3·9+16 + 16·16·9 + 4·16; block2: 16·16·9+16 + 16·16·9 + 4·16; ...
        let expect = (432 + 16 + 2304 + 64)
            + (2304 + 16 + 2304 + 64)
            + (4608 + 32 + 9216 + 128 + 512)
            + (9216 + 32 + 9216 + 128)
            + (32 * 5 + 5);
        assert_eq!(a.parameter_count(), expect);
    }
}
