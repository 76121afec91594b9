use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::binarize::{binarize, GitMode, GreedyOrder};
use crate::error::{Error, Result};
use crate::network::Mode;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Spatial size of a grid patch. Written `HxW`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GridSize {
    pub h: usize,
    pub w: usize,
}

impl GridSize {
    pub const fn new(h: usize, w: usize) -> Self {
        GridSize { h, w }
    }

    pub fn cells(self) -> usize {
        self.h * self.w
    }

    /// Row-major cell of flat index `i`: `(i div W, i mod W)`.
    pub fn cell(self, i: usize) -> (usize, usize) {
        (i / self.w, i % self.w)
    }
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl FromStr for GridSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("grid size `{s}` is not of the form HxW"));
        let (h, w) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
        let h: usize = h.trim().parse().map_err(|_| bad())?;
        let w: usize = w.trim().parse().map_err(|_| bad())?;
        if h == 0 || w == 0 {
            return Err(bad());
        }
        Ok(GridSize { h, w })
    }
}

impl TryFrom<String> for GridSize {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridSize> for String {
    fn from(g: GridSize) -> String {
        g.to_string()
    }
}

/// Parses `5x5,6x6,...`.
pub fn parse_grid_list(s: &str) -> Result<Vec<GridSize>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

/// Up-sampling transform: `X' = Λ·X`, or `(Λ·A)·X` when adjacency-regulated.
#[derive(Clone, Debug, PartialEq)]
pub struct Upt<T> {
    /// `(HW, N_in)`.
    pub lambda: Tensor<T>,
    pub use_adjacency: bool,
    pub learnable: bool,
}

/// Graph-node index transform: binary `Φ` derived from the assistant `Ψ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Git<T> {
    /// `(HW, width)`.
    pub psi: Tensor<T>,
    pub mode: GitMode,
    pub order: GreedyOrder,
    pub learnable: bool,
    phi: Option<Tensor<T>>,
}

impl<T: Scalar> Git<T> {
    pub fn new(psi: Tensor<T>, mode: GitMode, order: GreedyOrder, learnable: bool) -> Self {
        Git { psi, mode, order, learnable, phi: None }
    }

    pub fn derive_phi(&self) -> Result<Tensor<T>> {
        binarize(&self.psi, self.mode, self.order)
    }

    /// Re-derives and caches `Φ`.
    pub fn refresh_phi(&mut self) -> Result<&Tensor<T>> {
        self.phi = Some(self.derive_phi()?);
        Ok(self.phi.as_ref().unwrap())
    }

    /// Cached `Φ`, deriving it on first use.
    pub fn phi(&mut self) -> Result<&Tensor<T>> {
        if self.phi.is_none() {
            self.refresh_phi()?;
        }
        Ok(self.phi.as_ref().unwrap())
    }

    pub fn cached_phi(&self) -> Option<&Tensor<T>> {
        self.phi.as_ref()
    }

    /// Installs a stored `Φ` (inference-only loading).
    pub fn set_phi(&mut self, phi: Tensor<T>) -> Result<()> {
        if phi.shape() != self.psi.shape() {
            return Err(Error::Load(format!("phi {:?} does not match psi {:?}", phi.shape(), self.psi.shape())));
        }
        self.phi = Some(phi);
        Ok(())
    }
}

/// Per-stage construction options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub grid: GridSize,
    pub use_upt: bool,
    pub use_adjacency: bool,
    pub git_mode: GitMode,
    pub greedy: GreedyOrder,
    pub learnable_lambda: bool,
    pub learnable_psi: bool,
    /// The extra up-sampling rows start as `uniform(0, scale / N_in)`.
    pub lambda_init_scale: f64,
}

impl StageConfig {
    pub fn new(grid: GridSize) -> Self {
        StageConfig {
            grid,
            use_upt: true,
            use_adjacency: true,
            git_mode: GitMode::Bijective,
            greedy: GreedyOrder::Global,
            learnable_lambda: true,
            learnable_psi: true,
            lambda_init_scale: 1.0,
        }
    }
}

/// One up-sampling + index transform pair producing an `H×W` patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub grid: GridSize,
    /// Node count entering the stage.
    pub n_in: usize,
    pub upt: Option<Upt<T>>,
    pub git: Git<T>,
}

impl<T: Scalar> Stage<T> {
    /// Fresh stage: `Λ` is the `N_in×N_in` identity stacked on
    /// `uniform(0, scale/N_in)` rows, `Ψ` is `uniform(0, 1)`.
    pub fn init(n_in: usize, cfg: &StageConfig, seed: u64) -> Result<Self> {
        let hw = cfg.grid.cells();
        if cfg.use_upt && hw < n_in {
            return Err(Error::config(format!(
                "grid {} has {hw} cells, fewer than the {n_in} incoming nodes",
                cfg.grid
            )));
        }
        let width = if cfg.use_upt { hw } else { n_in };
        match cfg.git_mode {
            GitMode::Bijective if width != hw => {
                return Err(Error::config(format!(
                    "bijective index transform needs {hw} candidate nodes, got {width} (enable the up-sampling transform or use surjective mode)"
                )))
            }
            GitMode::Surjective if hw < width => {
                return Err(Error::config(format!(
                    "surjective index transform needs at least {width} cells, grid {} has {hw}",
                    cfg.grid
                )))
            }
            _ => {}
        }
        if !(cfg.lambda_init_scale >= 0.0) {
            return Err(Error::config("lambda_init_scale must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upt = if cfg.use_upt {
            let hi = cfg.lambda_init_scale / n_in as f64;
            let mut lambda = Tensor::<T>::zeros(&[hw, n_in]);
            for r in 0..hw {
                for c in 0..n_in {
                    let v = if r < n_in {
                        if r == c {
                            1.0
                        } else {
                            0.0
                        }
                    } else if hi > 0.0 {
                        rng.random_range(0.0..hi)
                    } else {
                        0.0
                    };
                    lambda.data_mut()[r * n_in + c] = T::lit(v);
                }
            }
            Some(Upt { lambda, use_adjacency: cfg.use_adjacency, learnable: cfg.learnable_lambda })
        } else {
            None
        };
        let psi = Tensor::from_fn(&[hw, width], |_| T::lit(rng.random_range(0.0..1.0)));
        let git = Git::new(psi, cfg.git_mode, cfg.greedy, cfg.learnable_psi);
        Ok(Stage { grid: cfg.grid, n_in, upt, git })
    }

    /// Nodes entering the index transform.
    pub fn git_width(&self) -> usize {
        self.git.psi.dim(1)
    }
}

/// `X' = Λ·X` (or `(Λ·A)·X`) applied along the node axis of `x`.
pub fn upt_apply<T: Scalar>(g: &mut Graph<T>, lambda: Var, adjacency: Option<Var>, x: Var) -> Result<Var> {
    let m = match adjacency {
        Some(a) => g.matmul(lambda, a)?,
        None => lambda,
    };
    g.node_map(x, m)
}

/// `reshape(Φ·X')` with `Φ` derived from `psi` by `mode`; the gradient
/// reaching `Φ` is passed straight to `psi`. With `grid`, the node axis is
/// unfolded into `(H, W)`, node `i` landing in cell `(i div W, i mod W)`.
pub fn git_apply<T: Scalar>(
    g: &mut Graph<T>,
    psi: Var,
    mode: GitMode,
    order: GreedyOrder,
    x: Var,
    grid: Option<GridSize>,
) -> Result<Var> {
    let phi = binarize(g.value(psi), mode, order)?;
    git_apply_with(g, psi, phi, x, grid)
}

fn git_apply_with<T: Scalar>(
    g: &mut Graph<T>,
    psi: Var,
    phi: Tensor<T>,
    x: Var,
    grid: Option<GridSize>,
) -> Result<Var> {
    let phi = g.straight_through(psi, phi)?;
    let y = g.node_map(x, phi)?;
    match grid {
        Some(grid) => unfold_grid(g, y, grid),
        None => Ok(y),
    }
}

fn unfold_grid<T: Scalar>(g: &mut Graph<T>, y: Var, grid: GridSize) -> Result<Var> {
    let mut shape = g.shape(y).to_vec();
    let last = shape.pop().unwrap_or(0);
    if last != grid.cells() {
        return Err(Error::dim(format!("{last} nodes cannot fill a {grid} grid")));
    }
    shape.extend([grid.h, grid.w]);
    g.reshape(y, &shape)
}

pub fn lambda_name(stage: usize) -> String {
    format!("stage{}.lambda", stage + 1)
}

pub fn psi_name(stage: usize) -> String {
    format!("stage{}.psi", stage + 1)
}

pub fn phi_name(stage: usize) -> String {
    format!("stage{}.phi", stage + 1)
}

/// Ordered stages of transform pairs; the first `frozen_prefix` stages take
/// no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade<T> {
    n_joints: usize,
    stages: Vec<Stage<T>>,
    frozen_prefix: usize,
}

impl<T: Scalar> Cascade<T> {
    pub fn new(n_joints: usize) -> Self {
        Cascade { n_joints, stages: Vec::new(), frozen_prefix: 0 }
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn stage_mut(&mut self, k: usize) -> &mut Stage<T> {
        &mut self.stages[k]
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    pub fn is_frozen(&self, k: usize) -> bool {
        k < self.frozen_prefix
    }

    pub fn final_grid(&self) -> Option<GridSize> {
        self.stages.last().map(|s| s.grid)
    }

    /// Node count produced by the last stage (the joint count when empty).
    pub fn out_width(&self) -> usize {
        self.stages.last().map_or(self.n_joints, |s| s.grid.cells())
    }

    /// Appends a freshly initialized stage after checking the shape chain.
    pub fn push_stage(&mut self, cfg: &StageConfig, seed: u64) -> Result<()> {
        let k = self.stages.len();
        if let Some(prev) = self.stages.last() {
            if cfg.grid.h <= prev.grid.h || cfg.grid.w <= prev.grid.w {
                return Err(Error::config(format!(
                    "stage {} grid {} must be strictly larger than stage {k} grid {} in both dimensions",
                    k + 1,
                    cfg.grid,
                    prev.grid
                )));
            }
            if cfg.use_upt && cfg.use_adjacency {
                return Err(Error::config(format!(
                    "stage {}: only the first up-sampling transform is adjacency-regulated",
                    k + 1
                )));
            }
        }
        let stage = Stage::init(self.out_width(), cfg, seed)
            .map_err(|e| Error::config(format!("stage {}: {}", k + 1, strip_prefix(&e))))?;
        self.stages.push(stage);
        Ok(())
    }

    /// Marks stages `1..=k` as non-trainable.
    pub fn freeze_prefix(&mut self, k: usize) -> Result<()> {
        if k > self.stages.len() {
            return Err(Error::config(format!("cannot freeze {k} stages of a {}-stage cascade", self.stages.len())));
        }
        self.frozen_prefix = k;
        Ok(())
    }

    /// Checks the stage shape chain; errors name the offending stage.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.n_joints;
        let mut prev: Option<GridSize> = None;
        for (k, s) in self.stages.iter().enumerate() {
            let name = k + 1;
            if s.n_in != width {
                return Err(Error::config(format!("stage {name} expects {} nodes but receives {width}", s.n_in)));
            }
            if let Some(p) = prev {
                if s.grid.h <= p.h || s.grid.w <= p.w {
                    return Err(Error::config(format!("stage {name} grid {} does not grow from {p}", s.grid)));
                }
            }
            let hw = s.grid.cells();
            let git_in = match &s.upt {
                Some(u) => {
                    if u.lambda.shape() != [hw, width] {
                        return Err(Error::config(format!(
                            "stage {name} lambda is {:?}, expected [{hw}, {width}]",
                            u.lambda.shape()
                        )));
                    }
                    if k > 0 && u.use_adjacency {
                        return Err(Error::config(format!("stage {name} cannot use adjacency regulation")));
                    }
                    hw
                }
                None => width,
            };
            if s.git.psi.shape() != [hw, git_in] {
                return Err(Error::config(format!(
                    "stage {name} psi is {:?}, expected [{hw}, {git_in}]",
                    s.git.psi.shape()
                )));
            }
            width = hw;
            prev = Some(s.grid);
        }
        Ok(())
    }

    /// Runs every stage on `x: (B, C, T, N)` and returns `(B, C, T, H, W)`.
    ///
    /// Training mode re-derives and caches every `Φ`; evaluation reuses the
    /// cache. Parameters are recorded as named leaves
    /// (`stage{k}.lambda`, `stage{k}.psi`), trainable unless frozen or fixed.
    pub fn forward(&mut self, g: &mut Graph<T>, adjacency: Option<&Tensor<T>>, x: Var, mode: Mode) -> Result<Var> {
        self.validate()?;
        let grid = self.final_grid().ok_or_else(|| Error::config("cascade has no stages"))?;
        let mut h = x;
        let last = self.stages.len() - 1;
        for k in 0..self.stages.len() {
            let frozen = self.is_frozen(k);
            let stage = &mut self.stages[k];
            if let Some(upt) = &stage.upt {
                let lambda = g.param(&lambda_name(k), upt.lambda.clone(), !frozen && upt.learnable);
                let a = if upt.use_adjacency {
                    let a = adjacency.ok_or_else(|| {
                        Error::config("the first up-sampling transform is adjacency-regulated but no adjacency was given")
                    })?;
                    Some(g.constant(a.clone()))
                } else {
                    None
                };
                h = upt_apply(g, lambda, a, h)?;
            }
            let psi = g.param(&psi_name(k), stage.git.psi.clone(), !frozen && stage.git.learnable);
            let phi = match mode {
                Mode::Train if !frozen => stage.git.refresh_phi()?.clone(),
                _ => stage.git.phi()?.clone(),
            };
            h = git_apply_with(g, psi, phi, h, (k == last).then_some(grid))?;
        }
        Ok(h)
    }

    /// `Φ_k·Λ_k···Φ_1·(Λ_1·A)` as one `(HW, N)` matrix. With `magnitudes`,
    /// every factor is replaced by its elementwise absolute value first.
    pub fn composed_matrix(&mut self, adjacency: Option<&Tensor<T>>, magnitudes: bool) -> Result<Tensor<T>> {
        let fix = |t: &Tensor<T>| if magnitudes { t.abs() } else { t.clone() };
        let mut acc = Tensor::<T>::eye(self.n_joints);
        for k in 0..self.stages.len() {
            let stage = &mut self.stages[k];
            if let Some(upt) = &stage.upt {
                let mut m = upt.lambda.clone();
                if upt.use_adjacency {
                    let a = adjacency.ok_or_else(|| Error::config("adjacency required for the first stage"))?;
                    m = m.matmul(a)?;
                }
                acc = fix(&m).matmul(&acc)?;
            }
            acc = fix(stage.git.phi()?).matmul(&acc)?;
        }
        Ok(acc)
    }

    /// Caches `Φ` for every stage.
    pub fn refresh_all_phi(&mut self) -> Result<()> {
        for s in &mut self.stages {
            s.git.refresh_phi()?;
        }
        Ok(())
    }

    /// Every persisted tensor: `Λ`, `Ψ` and the cached `Φ` of each stage.
    pub fn named_tensors(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let mut out = Vec::new();
        for k in 0..self.stages.len() {
            let s = &mut self.stages[k];
            if let Some(u) = &s.upt {
                out.push((lambda_name(k), u.lambda.clone()));
            }
            out.push((psi_name(k), s.git.psi.clone()));
            out.push((phi_name(k), s.git.phi()?.clone()));
        }
        Ok(out)
    }

    /// Trainable tensors by name.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let frozen = self.frozen_prefix;
        let mut out = Vec::new();
        for (k, s) in self.stages.iter_mut().enumerate() {
            if k < frozen {
                continue;
            }
            if let Some(u) = s.upt.as_mut().filter(|u| u.learnable) {
                out.push((lambda_name(k), &mut u.lambda));
            }
            if s.git.learnable {
                out.push((psi_name(k), &mut s.git.psi));
            }
        }
        out
    }

    /// Overwrites one stage tensor by its persisted name. Returns `false`
    /// for names that do not belong to this cascade.
    pub fn load_tensor(&mut self, name: &str, t: &Tensor<T>) -> Result<bool> {
        let Some((k, field)) = parse_stage_name(name) else { return Ok(false) };
        let Some(s) = self.stages.get_mut(k) else { return Ok(false) };
        let check = |dst: &Tensor<T>| {
            if dst.shape() != t.shape() {
                Err(Error::Load(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), dst.shape())))
            } else {
                Ok(())
            }
        };
        match field {
            "lambda" => match s.upt.as_mut() {
                Some(u) => {
                    check(&u.lambda)?;
                    u.lambda = t.clone();
                }
                None => return Ok(false),
            },
            "psi" => {
                check(&s.git.psi)?;
                s.git.psi = t.clone();
                s.git.phi = None;
            }
            "phi" => s.git.set_phi(t.clone())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse_stage_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("stage")?;
    let (num, field) = rest.split_once('.')?;
    let k: usize = num.parse().ok()?;
    (k >= 1).then_some((k - 1, field))
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grid_size_parsing() {
        assert_eq!("5x6".parse::<GridSize>().unwrap(), GridSize::new(5, 6));
        assert_eq!(GridSize::new(7, 7).to_string(), "7x7");
        assert!("5".parse::<GridSize>().is_err());
        assert!("0x3".parse::<GridSize>().is_err());
        assert_eq!(parse_grid_list("5x5, 6x6").unwrap().len(), 2);
        assert_eq!(GridSize::new(2, 3).cell(4), (1, 1));
    }

    #[test]
    fn upt_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1], &[1.0, 2.0]));
        // upt_apply works along the last axis, so use X as (C, N) = its transpose.
        let xt = g.reshape(x, &[1, 2]).unwrap();
        let lam = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = upt_apply(&mut g, lam, Some(a), xt).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);

        let lam = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]));
        let a = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let y = upt_apply(&mut g, lam, Some(a), xt).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0, 1.5]);

        let bad = g.constant(Tensor::eye(3));
        assert!(matches!(upt_apply(&mut g, bad, None, xt), Err(Error::Dimension(_))));
    }

    #[test]
    fn git_identity_layout_is_row_major() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let psi = g.leaf(Tensor::eye(4), true);
        let y = git_apply(&mut g, psi, GitMode::Bijective, GreedyOrder::Global, x, Some(GridSize::new(2, 2))).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn git_ste_gradient_equals_x_rows() {
        // L = sum(Y), C = 1, X' = [[5],[7]]  →  dL/dΦ[i][j] = x'_j.
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[5.0, 7.0]));
        let psi = g.leaf(t(&[2, 2], &[0.3, 0.1, 0.2, 0.9]), true);
        let y = git_apply(&mut g, psi, GitMode::Bijective, GreedyOrder::Global, x, None).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(psi).unwrap().data(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn init_identity_block_and_determinism() {
        let cfg = StageConfig::new(GridSize::new(3, 3));
        let s = Stage::<f64>::init(9, &cfg, 1).unwrap();
        assert_eq!(s.upt.as_ref().unwrap().lambda, Tensor::eye(9));

        let cfg = StageConfig::new(GridSize::new(5, 5));
        let a = Stage::<f64>::init(17, &cfg, 9).unwrap();
        let b = Stage::<f64>::init(17, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let lam = &a.upt.as_ref().unwrap().lambda;
        for r in 0..25 {
            for c in 0..17 {
                let v = lam.at(&[r, c]);
                if r < 17 {
                    assert_eq!(v, if r == c { 1.0 } else { 0.0 });
                } else {
                    assert!((0.0..1.0 / 17.0).contains(&v));
                }
            }
        }
        assert!(a.git.psi.data().iter().all(|v| (0.0..1.0).contains(v)));
        assert_ne!(a.git.psi, Stage::<f64>::init(17, &cfg, 10).unwrap().git.psi);
    }

    #[test]
    fn init_rejects_incompatible_modes() {
        let mut cfg = StageConfig::new(GridSize::new(4, 4));
        assert!(Stage::<f64>::init(17, &cfg, 0).is_err());
        cfg.grid = GridSize::new(5, 5);
        cfg.use_upt = false;
        assert!(Stage::<f64>::init(17, &cfg, 0).is_err());
        cfg.git_mode = GitMode::Surjective;
        assert_eq!(Stage::<f64>::init(17, &cfg, 0).unwrap().git.psi.shape(), &[25, 17]);
    }

    #[test]
    fn cascade_chain_checks() {
        let mut c = Cascade::<f64>::new(17);
        c.push_stage(&StageConfig::new(GridSize::new(5, 5)), 0).unwrap();
        let mut next = StageConfig::new(GridSize::new(6, 6));
        assert!(c.push_stage(&next, 1).is_err(), "adjacency on stage 2");
        next.use_adjacency = false;
        let mut same = next;
        same.grid = GridSize::new(5, 6);
        assert!(c.push_stage(&same, 1).is_err(), "grid must grow in both dims");
        c.push_stage(&next, 1).unwrap();
        c.validate().unwrap();
        assert!(c.freeze_prefix(3).is_err());
        c.freeze_prefix(1).unwrap();
        let names: Vec<String> = c.trainable_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["stage2.lambda", "stage2.psi"]);

        let mut broken = c.clone();
        broken.stages[1].upt.as_mut().unwrap().lambda = Tensor::zeros(&[36, 24]);
        let err = broken.validate().unwrap_err().to_string();
        assert!(err.contains("stage 2"), "{err}");
    }

    #[test]
    fn load_tensor_by_name() {
        let mut c = Cascade::<f64>::new(4);
        c.push_stage(&StageConfig::new(GridSize::new(2, 2)), 0).unwrap();
        let psi = Tensor::from_fn(&[4, 4], |i| (i % 5) as f64);
        assert!(c.load_tensor("stage1.psi", &psi).unwrap());
        assert_eq!(c.stages()[0].git.psi, psi);
        assert!(!c.load_tensor("stage2.psi", &psi).unwrap());
        assert!(!c.load_tensor("block1.spatial.weight", &psi).unwrap());
        assert!(matches!(c.load_tensor("stage1.lambda", &Tensor::zeros(&[3, 4])), Err(Error::Load(_))));
    }
}
