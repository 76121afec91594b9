use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ske2grid::network::Mode;
use ske2grid::skeleton::SkeletonGraph;
use ske2grid::tensor::{Graph, Tensor};
use ske2grid::transform::{
    assign_bijective, assign_surjective, binarize_rowwise, git_apply, upt_apply, Cascade, GitMode, GreedyOrder,
    GridSize, StageConfig,
};

/// Matrices with small integer entries so ties are common.
fn tied_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(0u8..4, r * c).prop_map(move |v| Tensor::new(vec![r, c], v.into_iter().map(f64::from).collect()).unwrap())
    })
}

fn square_matrix(max: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Tensor::new(vec![n, n], v).unwrap())
    })
}

proptest! {
    #[test]
    fn rowwise_picks_the_lowest_maximal_index(psi in tied_matrix(12, 12)) {
        let [r, c] = [psi.dim(0), psi.dim(1)];
        let hard = binarize_rowwise(&psi).unwrap();
        for i in 0..r {
            let row = &psi.data()[i * c..][..c];
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            let first = row.iter().position(|&v| v == max).unwrap();
            let expect: Vec<f64> = (0..c).map(|j| if j == first { 1.0 } else { 0.0 }).collect();
            prop_assert_eq!(&hard.data()[i * c..][..c], &expect[..]);
        }
    }

    #[test]
    fn bijective_is_a_permutation(psi in square_matrix(16)) {
        for order in [GreedyOrder::Global, GreedyOrder::RowOrder] {
            let mut a = assign_bijective(&psi, order).unwrap();
            a.sort_unstable();
            prop_assert_eq!(a, (0..psi.dim(0)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn surjective_covers_every_column(psi in tied_matrix(20, 8)) {
        prop_assume!(psi.dim(0) >= psi.dim(1));
        let a = assign_surjective(&psi).unwrap();
        for j in 0..psi.dim(1) {
            prop_assert!(a.contains(&j));
        }
    }

    #[test]
    fn assistant_gradient_is_the_binary_matrix_gradient(seed in any::<u64>(), h in 1usize..4, w in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSize::new(h, w);
        let n = grid.cells();
        let psi = Tensor::from_fn(&[n, n], |_| rng.random_range(0.0..1.0));
        let x = Tensor::from_fn(&[2, 3, 4, n], |_| rng.random_range(-1.0..1.0));
        let weights = Tensor::from_fn(&[2, 3, 4, h, w], |_| rng.random_range(-1.0..1.0));

        let mut g = Graph::new();
        let p = g.leaf(psi.clone(), true);
        let xv = g.constant(x.clone());
        let y = git_apply(&mut g, p, GitMode::Bijective, GreedyOrder::Global, xv, Some(grid)).unwrap();
        let loss = g.weighted_sum(y, &weights).unwrap();
        let via_psi = g.backward(loss).unwrap().get(p).unwrap().clone();

        let phi = ske2grid::transform::binarize(&psi, GitMode::Bijective, GreedyOrder::Global).unwrap();
        let mut g = Graph::new();
        let m = g.leaf(phi, true);
        let xv = g.constant(x);
        let y = g.node_map(xv, m).unwrap();
        let y = g.reshape(y, &[2, 3, 4, h, w]).unwrap();
        let loss = g.weighted_sum(y, &weights).unwrap();
        let via_phi = g.backward(loss).unwrap().get(m).unwrap().clone();
        prop_assert!(via_psi.max_abs_diff(&via_phi) <= 1e-12);
    }
}

fn two_stage(seed: u64) -> (Cascade<f64>, Tensor<f64>) {
    let graph = SkeletonGraph::builtin("chain17").unwrap();
    let mut c = Cascade::new(17);
    let mut first = StageConfig::new(GridSize::new(5, 5));
    first.use_adjacency = true;
    c.push_stage(&first, seed).unwrap();
    let mut second = StageConfig::new(GridSize::new(6, 6));
    second.use_adjacency = false;
    c.push_stage(&second, seed + 1).unwrap();
    (c, graph.adjacency(Default::default()))
}

#[test]
fn derived_assignment_and_eval_forward_are_repeatable() {
    let (mut c, a) = two_stage(3);
    let x = Tensor::from_fn(&[2, 3, 4, 17], |i| (i as f64 * 0.37).sin());
    let stage = &c.stages()[0];
    assert_eq!(stage.git.derive_phi().unwrap(), stage.git.derive_phi().unwrap());
    c.refresh_all_phi().unwrap();
    let run = |c: &mut Cascade<f64>| {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = c.forward(&mut g, Some(&a), xv, Mode::Eval).unwrap();
        g.value(y).clone()
    };
    let (p, q) = (run(&mut c), run(&mut c));
    assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn gradients_reach_unfrozen_stages_and_input_only() {
    let (mut c, a) = two_stage(8);
    c.freeze_prefix(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[2, 3, 4, 17], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[2, 3, 4, 6, 6], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let y = c.forward(&mut g, Some(&a), xv, Mode::Train).unwrap();
    let loss = g.weighted_sum(y, &w).unwrap();
    let grads = g.backward(loss).unwrap();
    let nonzero = |t: Option<&Tensor<f64>>| t.is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
    assert!(nonzero(grads.get(xv)));
    assert!(nonzero(grads.by_name("stage2.lambda")));
    assert!(nonzero(grads.by_name("stage2.psi")));
    assert!(!nonzero(grads.by_name("stage1.lambda")));
    assert!(!nonzero(grads.by_name("stage1.psi")));
}

#[test]
fn single_stage_is_index_transform_of_upsampling() {
    let graph = SkeletonGraph::builtin("star9").unwrap();
    let a = graph.adjacency::<f64>(Default::default());
    let mut cfg = StageConfig::new(GridSize::new(3, 4));
    cfg.use_adjacency = true;
    let mut c = Cascade::new(9);
    c.push_stage(&cfg, 2).unwrap();
    let x = Tensor::from_fn(&[1, 3, 5, 9], |i| (i as f64).cos());

    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let y = c.forward(&mut g, Some(&a), xv, Mode::Train).unwrap();
    let y = g.value(y).clone();

    let stage = &c.stages()[0];
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let lambda = g.constant(stage.upt.as_ref().unwrap().lambda.clone());
    let av = g.constant(a.clone());
    let psi = g.constant(stage.git.psi.clone());
    let h = upt_apply(&mut g, lambda, Some(av), xv).unwrap();
    let z = git_apply(&mut g, psi, cfg.git_mode, cfg.greedy, h, Some(cfg.grid)).unwrap();
    assert_eq!(g.value(z), &y);
}
