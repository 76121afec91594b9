use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ske2grid::tensor::{Graph, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Temporal conv → batch norm → relu → spatial conv → pool → linear → loss.
struct Chain {
    x: Tensor<f64>,
    kt: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
    ks: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    labels: Vec<usize>,
}

impl Chain {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, c, t, h, w, k) = (2, rng.random_range(1..4), rng.random_range(2..7), 2, 3, 3);
        Chain {
            x: random(&mut rng, &[batch, c, t, h, w]),
            kt: random(&mut rng, &[4, c, 3]),
            gamma: random(&mut rng, &[4]),
            beta: random(&mut rng, &[4]),
            ks: random(&mut rng, &[2, 4, 3, 3]),
            w: random(&mut rng, &[k, 2]),
            b: random(&mut rng, &[k]),
            labels: (0..batch).map(|_| rng.random_range(0..k)).collect(),
        }
    }

    /// Returns the loss, the pooled features and the leaves.
    fn loss(&self, g: &mut Graph<f64>) -> (Var, Var, Vec<Var>) {
        let leaves: Vec<Var> = [&self.x, &self.kt, &self.gamma, &self.beta, &self.ks, &self.w, &self.b]
            .into_iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect();
        let [x, kt, gamma, beta, ks, w, b] = leaves[..] else { unreachable!() };
        let y = g.temporal_conv(x, kt, 1).unwrap();
        let y = g.batch_norm_train(y, gamma, beta).unwrap().0;
        let y = g.relu(y).unwrap();
        let y = g.spatial_conv(y, ks, None).unwrap();
        let pooled = g.global_avg_pool(y).unwrap();
        let y = g.linear(pooled, w, b).unwrap();
        (g.softmax_cross_entropy(y, &self.labels).unwrap(), pooled, leaves)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recording_does_not_change_forward_values(seed in any::<u64>()) {
        let chain = Chain::new(seed);
        let mut on = Graph::new();
        let (a, _, _) = chain.loss(&mut on);
        let mut off = Graph::no_grad();
        let (b, _, _) = chain.loss(&mut off);
        prop_assert_eq!(on.value(a).data()[0].to_bits(), off.value(b).data()[0].to_bits());
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), s in -3.0f64..3.0) {
        let chain = Chain::new(seed);
        let mut g = Graph::new();
        let (l1, pooled, leaves) = chain.loss(&mut g);
        let shape = g.shape(pooled).to_vec();
        let l2 = g.weighted_sum(pooled, &Tensor::from_fn(&shape, |i| s * (i as f64 + 1.0))).unwrap();
        let total = g.add(l1, l2).unwrap();
        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        let gt = g.backward(total).unwrap();
        for v in leaves {
            let (a, b, t) = (g1.get(v).unwrap(), g2.get(v).unwrap(), gt.get(v).unwrap());
            for i in 0..t.numel() {
                prop_assert!((a.data()[i] + b.data()[i] - t.data()[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn temporal_output_length_is_ceil_of_stride(t in 1usize..20, stride in 1usize..3, kt in prop::sample::select(vec![1usize, 3, 5, 9])) {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::zeros(&[1, 2, t, 3]));
        let k = g.constant(Tensor::zeros(&[4, 2, kt]));
        let y = g.temporal_conv(x, k, stride).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 4, t.div_ceil(stride), 3][..]);
    }
}
