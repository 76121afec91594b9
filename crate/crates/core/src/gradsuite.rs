//! Central-difference gradient checks of every differentiable operation and
//! of the whole pipeline, in f64.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{Mode, ModelConfig, ModelKind, Network};
use crate::tensor::{grad_check, Graph, Tensor, Var, GRAD_CHECK_STEP};
use crate::transform::{binarize, git_apply, upt_apply, GitMode, GreedyOrder, GridSize};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} {:>3} instances  max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_rel_err,
            self.tolerance
        )
    }
}

type Instance = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Every checked case: name, tolerance and one random instance returning its
/// worst relative error.
pub const CASES: [(&str, f64, Instance); 20] = [
    ("matmul", OP_TOLERANCE, matmul),
    ("node_map", OP_TOLERANCE, node_map),
    ("add", OP_TOLERANCE, add),
    ("relu", OP_TOLERANCE, relu),
    ("reshape", OP_TOLERANCE, reshape),
    ("scale", OP_TOLERANCE, scale),
    ("sum", OP_TOLERANCE, sum),
    ("conv2d_same", OP_TOLERANCE, conv2d_same),
    ("spatial_conv", OP_TOLERANCE, spatial_conv),
    ("temporal_conv", OP_TOLERANCE, temporal_conv),
    ("graph_conv", OP_TOLERANCE, graph_conv),
    ("batch_norm_train", OP_TOLERANCE, batch_norm_train),
    ("batch_norm_eval", OP_TOLERANCE, batch_norm_eval),
    ("global_avg_pool", OP_TOLERANCE, global_avg_pool),
    ("linear", OP_TOLERANCE, linear),
    ("softmax_cross_entropy", OP_TOLERANCE, softmax_cross_entropy),
    ("straight_through", OP_TOLERANCE, straight_through),
    ("upsampling", OP_TOLERANCE, upsampling),
    ("index_transform", OP_TOLERANCE, index_transform),
    ("pipeline", PIPELINE_TOLERANCE, pipeline),
];

/// Runs `instances` random instances of every case. Instance `i` of case `c`
/// draws from a generator seeded by `(seed, c, i)`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .enumerate()
        .map(|(c, &(name, tolerance, instance))| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64) << 40) ^ i as u64);
                worst = worst.max(instance(&mut rng)?);
            }
            Ok(CaseResult { name, instances, max_rel_err: worst, tolerance })
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Contracts `y` with fixed random weights into a scalar.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    g.weighted_sum(y, w)
}

/// Checks `f` with respect to each of `inputs`, holding the others constant.
/// `f` receives the graph and one variable per input.
fn check_inputs<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out_shape = {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let w = random(rng, &out_shape);
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let report = grad_check(
            |g, leaf| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == k { leaf } else { g.constant(t.clone()) })
                    .collect();
                let y = f(g, &vars)?;
                project(g, y, &w)
            },
            &inputs[k],
            GRAD_CHECK_STEP,
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    let inputs = [random(rng, &[m, k]), random(rng, &[k, n])];
    check_inputs(rng, &inputs, |g, v| g.matmul(v[0], v[1]))
}

fn node_map(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, n, p) = (dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 6));
    let inputs = [random(rng, &[b, 2, n]), random(rng, &[p, n])];
    check_inputs(rng, &inputs, |g, v| g.node_map(v[0], v[1]))
}

fn add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
    let inputs = [random(rng, &shape), random(rng, &shape)];
    check_inputs(rng, &inputs, |g, v| g.add(v[0], v[1]))
}

fn relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 6)];
    let inputs = [random(rng, &shape)];
    check_inputs(rng, &inputs, |g, v| g.relu(v[0]))
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let inputs = [random(rng, &[a, b, 2])];
    check_inputs(rng, &inputs, |g, v| g.reshape(v[0], &[2 * b, a]))
}

fn scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rng.random_range(-2.0..2.0);
    let shape = [dim(rng, 1, 5)];
    let inputs = [random(rng, &shape)];
    check_inputs(rng, &inputs, move |g, v| g.scale(v[0], s))
}

fn sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let inputs = [random(rng, &shape)];
    check_inputs(rng, &inputs, |g, v| {
        let s = g.sum(v[0])?;
        g.reshape(s, &[1])
    })
}

fn conv2d_same(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let k = [1, 3][dim(rng, 0, 1)];
    let inputs = [random(rng, &[b, ci, h, w]), random(rng, &[co, ci, k, k]), random(rng, &[co])];
    check_inputs(rng, &inputs, |g, v| g.conv2d_same(v[0], v[1], Some(v[2])))
}

fn spatial_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, ci, co, t) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let k = [1, 3, 5][dim(rng, 0, 2)];
    let inputs = [random(rng, &[b, ci, t, h, w]), random(rng, &[co, ci, k, k]), random(rng, &[co])];
    check_inputs(rng, &inputs, |g, v| g.spatial_conv(v[0], v[1], Some(v[2])))
}

fn temporal_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, ci, co, t, s) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 8), dim(rng, 1, 4));
    let kt = [1, 3, 5, 9][dim(rng, 0, 3)];
    let stride = dim(rng, 1, 2);
    let inputs = [random(rng, &[b, ci, t, s]), random(rng, &[co, ci, kt])];
    check_inputs(rng, &inputs, move |g, v| g.temporal_conv(v[0], v[1], stride))
}

fn graph_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, ci, co, t, n) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 5));
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| j == i || rng.random_bool(0.4)).collect()).collect();
    let neighbors = Arc::new(neighbors);
    let inputs = [random(rng, &[b, ci, t, n]), random(rng, &[co, n, n, ci]), random(rng, &[co])];
    check_inputs(rng, &inputs, move |g, v| g.graph_conv(v[0], v[1], Some(v[2]), neighbors.clone()))
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, c, l) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 1, 4));
    let inputs = [random(rng, &[b, c, l]), random(rng, &[c]), random(rng, &[c])];
    check_inputs(rng, &inputs, |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2])?.0))
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, c, l) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
    let inputs = [random(rng, &[b, c, l]), random(rng, &[c]), random(rng, &[c])];
    check_inputs(rng, &inputs, move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var))
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let inputs = [random(rng, &shape)];
    check_inputs(rng, &inputs, |g, v| g.global_avg_pool(v[0]))
}

fn linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, ci, co) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    let inputs = [random(rng, &[b, ci]), random(rng, &[co, ci]), random(rng, &[co])];
    check_inputs(rng, &inputs, |g, v| g.linear(v[0], v[1], v[2]))
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, k) = (dim(rng, 1, 4), dim(rng, 2, 6));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let logits = Tensor::from_fn(&[b, k], |_| rng.random_range(-3.0..3.0));
    let report = grad_check(|g, x| g.softmax_cross_entropy(x, &labels), &logits, GRAD_CHECK_STEP)?;
    Ok(report.max_rel_err)
}

/// Relative error between two gradient vectors, measured like `grad_check`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / n.abs().max(1.0)).fold(0.0, f64::max)
}

/// The assistant receives exactly the gradient of its hard value, which is
/// the central-difference gradient with respect to that value.
fn straight_through(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let psi = Tensor::from_fn(&[r, c], |_| rng.random_range(0.0..1.0));
    let hard = binarize(&psi, GitMode::Unconstrained, GreedyOrder::Global)?;
    let mix = random(rng, &[c, 3]);
    let w = random(rng, &[r, 3]);
    let mut g = Graph::new();
    let p = g.leaf(psi, true);
    let y = g.straight_through(p, hard.clone())?;
    let m = g.constant(mix.clone());
    let y = g.matmul(y, m)?;
    let loss = project(&mut g, y, &w)?;
    let analytic = g.backward(loss)?.get(p).expect("leaf requires grad").data().to_vec();
    let numeric = grad_check(
        |g, h| {
            let m = g.constant(mix.clone());
            let y = g.matmul(h, m)?;
            project(g, y, &w)
        },
        &hard,
        GRAD_CHECK_STEP,
    )?;
    Ok(rel_err(&analytic, &numeric.numeric).max(numeric.max_rel_err))
}

fn upsampling(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, n, p) = (dim(rng, 1, 2), dim(rng, 2, 5), dim(rng, 2, 7));
    let adjacency = Tensor::from_fn(&[n, n], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let inputs = [random(rng, &[p, n]), random(rng, &[b, 3, 2, n])];
    let with_adjacency = rng.random_bool(0.5);
    check_inputs(rng, &inputs, move |g, v| {
        let a = with_adjacency.then(|| g.constant(adjacency.clone()));
        upt_apply(g, v[0], a, v[1])
    })
}

/// Index transform: gradient with respect to the input, and the assistant's
/// straight-through gradient against central differences of the binary
/// matrix held as a free variable.
fn index_transform(rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = GridSize::new(dim(rng, 1, 3), dim(rng, 2, 3));
    let cells = grid.cells();
    let (b, n) = (dim(rng, 1, 2), cells);
    let mode = [GitMode::Bijective, GitMode::Surjective, GitMode::Unconstrained][dim(rng, 0, 2)];
    let psi = Tensor::from_fn(&[cells, n], |_| rng.random_range(0.0..1.0));
    let x = random(rng, &[b, 2, 3, n]);
    let w = random(rng, &[b, 2, 3, grid.h, grid.w]);

    let wrt_x = grad_check(
        |g, xv| {
            let p = g.constant(psi.clone());
            let y = git_apply(g, p, mode, GreedyOrder::Global, xv, Some(grid))?;
            project(g, y, &w)
        },
        &x,
        GRAD_CHECK_STEP,
    )?;

    let mut g = Graph::new();
    let p = g.leaf(psi.clone(), true);
    let xv = g.constant(x.clone());
    let y = git_apply(&mut g, p, mode, GreedyOrder::Global, xv, Some(grid))?;
    let loss = project(&mut g, y, &w)?;
    let analytic = g.backward(loss)?.get(p).expect("leaf requires grad").data().to_vec();
    let phi = binarize(&psi, mode, GreedyOrder::Global)?;
    let wrt_phi = grad_check(
        |g, m| {
            let xv = g.constant(x.clone());
            let y = g.node_map(xv, m)?;
            let y = g.reshape(y, &[b, 2, 3, grid.h, grid.w])?;
            project(g, y, &w)
        },
        &phi,
        GRAD_CHECK_STEP,
    )?;
    Ok(wrt_x.max_rel_err.max(wrt_phi.max_rel_err).max(rel_err(&analytic, &wrt_phi.numeric)))
}

/// Up-sampling, index transform, a two-block network and the loss, checked
/// with respect to the input, the up-sampling matrix, and the assistant
/// (through the straight-through surrogate).
fn pipeline(rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = GridSize::new(2, dim(rng, 2, 3));
    let cells = grid.cells();
    let (b, t, n, classes) = (2, dim(rng, 2, 4), dim(rng, 3, 5), 3);
    let mut cfg = ModelConfig::from_channels(ModelKind::Ske2grid, grid, classes, &[3, 4], &[2]);
    for block in &mut cfg.blocks {
        block.temporal_kernel = 3;
    }
    let net: Network<f64> = Network::new(cfg, rng.random())?;
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let adjacency = Tensor::from_fn(&[n, n], |i| if i / n == i % n || rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let lambda = Tensor::from_fn(&[cells, n], |_| rng.random_range(0.0..1.0));
    let psi = Tensor::from_fn(&[cells, cells], |_| rng.random_range(0.0..1.0));
    let phi = binarize(&psi, GitMode::Bijective, GreedyOrder::Global)?;
    let x = random(rng, &[b, 3, t, n]);

    // `transform` maps the up-sampled input to the grid.
    let run = |g: &mut Graph<f64>, x: Var, lambda: Var, transform: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>| {
        let a = g.constant(adjacency.clone());
        let h = upt_apply(g, lambda, Some(a), x)?;
        let y = transform(g, h)?;
        let logits = net.clone().forward(g, y, Mode::Train)?;
        g.softmax_cross_entropy(logits, &labels)
    };
    let via_psi = |g: &mut Graph<f64>, h: Var| {
        let p = g.constant(psi.clone());
        git_apply(g, p, GitMode::Bijective, GreedyOrder::Global, h, Some(grid))
    };

    let wrt_x = grad_check(
        |g, xv| {
            let l = g.constant(lambda.clone());
            run(g, xv, l, &via_psi)
        },
        &x,
        GRAD_CHECK_STEP,
    )?;
    let wrt_lambda = grad_check(
        |g, l| {
            let xv = g.constant(x.clone());
            run(g, xv, l, &via_psi)
        },
        &lambda,
        GRAD_CHECK_STEP,
    )?;

    let mut g = Graph::new();
    let p = g.leaf(psi.clone(), true);
    let xv = g.constant(x.clone());
    let l = g.constant(lambda.clone());
    let loss = run(&mut g, xv, l, &|g: &mut Graph<f64>, h| {
        git_apply(g, p, GitMode::Bijective, GreedyOrder::Global, h, Some(grid))
    })?;
    let analytic = g.backward(loss)?.get(p).expect("leaf requires grad").data().to_vec();
    let wrt_phi = grad_check(
        |g, m| {
            let xv = g.constant(x.clone());
            let l = g.constant(lambda.clone());
            run(g, xv, l, &|g: &mut Graph<f64>, h| {
                let y = g.node_map(h, m)?;
                g.reshape(y, &[b, 3, t, grid.h, grid.w])
            })
        },
        &phi,
        GRAD_CHECK_STEP,
    )?;
    Ok([wrt_x.max_rel_err, wrt_lambda.max_rel_err, wrt_phi.max_rel_err, rel_err(&analytic, &wrt_phi.numeric)]
        .into_iter()
        .fold(0.0, f64::max))
}
