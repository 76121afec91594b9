use proptest::prelude::*;
use ske2grid::config::RunConfig;
use ske2grid::network::{block_name, Mode, ModelConfig, ModelKind, Network, Preset};
use ske2grid::skeleton::{generate_synthetic, SkeletonGraph, Split, SynthParams};
use ske2grid::tensor::{Graph, Tensor};
use ske2grid::train::{train_stage, Sgd, TrainConfig};
use ske2grid::transform::GridSize;

#[test]
fn zero_rate_is_rejected_by_config_and_a_no_op_in_the_optimizer() {
    let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
    assert!(cfg.validate().unwrap_err().is_config());

    let run = RunConfig::default();
    let graph = SkeletonGraph::builtin("chain17").unwrap();
    let ds = generate_synthetic(&graph, &SynthParams::new(3, 10, 16, 0.3, 2)).unwrap();
    let mut model = run.model.build::<f32>(&graph, 3, &[GridSize::new(5, 5)], 0).unwrap();
    let before: Vec<(String, Tensor<f32>)> = model.trainable_mut().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut sgd = Sgd::new();
    for chunk in ds.split(Split::Train).chunks(8) {
        let (x, labels) = ds.batch::<f32>(chunk, 16).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = model.forward(&mut g, xv, Mode::Train).unwrap();
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.named().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
        sgd.step(model.trainable_mut(), &grads, &run.train.sgd(), |_| 0.0).unwrap();
    }
    for ((name, old), (_, new)) in before.iter().zip(model.trainable_mut()) {
        assert!(old.data().iter().zip(new.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} moved");
    }
}

#[test]
fn single_batch_overfits_within_200_steps() {
    let graph = SkeletonGraph::builtin("chain17").unwrap();
    let mut params = SynthParams::new(2, 10, 16, 1.0, 6);
    params.val_fraction = 0.2;
    let ds = generate_synthetic(&graph, &params).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 16);
    let run = RunConfig::default();
    let mut model = run.model.build::<f32>(&graph, 2, &[GridSize::new(5, 5)], 1).unwrap();
    let cfg = TrainConfig { epochs: 200, batch_size: 16, frames: 16, max_steps: Some(200), ..TrainConfig::default() };
    let mut first_perfect = None;
    let history = train_stage(&mut model, &ds, &cfg, &mut |r| {
        if r.split == Split::Train && r.top1 == 1.0 && first_perfect.is_none() {
            first_perfect = Some(r.epoch);
        }
    })
    .unwrap();
    assert!(history.iter().all(|r| r.loss.is_finite()));
    let epoch = first_perfect.expect("never reached 100% train accuracy");
    assert!(epoch <= 200, "{epoch}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn blocks_keep_the_grid_size(h in 1usize..6, w in 1usize..6, t in 4usize..10, seed in any::<u64>()) {
        let grid = GridSize::new(h, w);
        let cfg = ModelConfig::preset(Preset::Desk, ModelKind::Ske2grid, grid, 3);
        let mut net = Network::<f32>::new(cfg.clone(), seed).unwrap();
        let mut g = Graph::new();
        let mut x = g.constant(Tensor::from_fn(&[2, 3, t, h, w], |i| (i as f32 * 0.1).sin()));
        let mut frames = t;
        for (k, b) in cfg.blocks.iter().enumerate() {
            x = net.block_forward(&mut g, k, x, Mode::Train).unwrap();
            frames = frames.div_ceil(b.temporal_stride);
            prop_assert_eq!(g.shape(x), &[2, b.out_channels, frames, h, w][..]);
        }
        prop_assert!(net.get(&block_name(0, "spatial", "weight")).is_some());
    }
}
