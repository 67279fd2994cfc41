mod common;

use metaprune::model::ModelArch;
use metaprune::taskgen::Split;
use metaprune::tensor::{LrSchedule, Tape};
use metaprune::train::{fine_tune, TrainConfig};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = common::rng(11);
    for i in 0..100 {
        let c = common::grad_case(i, &mut rng);
        let err = common::grad_rel_error(&c, &mut rng).unwrap();
        assert!(err < 1e-6, "{} {:?}: relative error {err:e}", c.name, c.shapes);
    }
}

#[test]
fn composite_graph_matches_central_differences() {
    // Two-layer network with cross-entropy: exercises gradient accumulation
    // through shared nodes.
    let mut rng = common::rng(3);
    let labels = vec![0, 2, 1];
    let c = common::GradCase {
        name: "mlp",
        shapes: vec![vec![3, 4], vec![4, 5], vec![5], vec![5, 3]],
        build: Box::new(move |t: &mut Tape, v: &[_]| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bcast(h, v[2], 1)?;
            let a = t.relu(h);
            let s = t.softmax(a);
            let a = t.mul(a, s)?;
            let o = t.matmul(a, v[3])?;
            t.cross_entropy(o, &labels)
        }),
    };
    let err = common::grad_rel_error(&c, &mut rng).unwrap();
    assert!(err < 1e-6, "relative error {err:e}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -30.0..30.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(vec![rows, cols], data).unwrap();
        let s = t.softmax(x);
        for r in t.value(s).chunks(cols) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_never_increases(base in 1e-4f64..1.0, frac in 0.0f64..1.0, total in 1usize..500) {
        let s = LrSchedule::new(base, base * frac, total).unwrap();
        let lrs: Vec<f64> = (0..=total).map(|k| s.lr(k).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        prop_assert!(s.lr(total + 1).is_err());
    }
}

#[test]
fn training_is_bit_deterministic() {
    let arch = ModelArch::Mlp { input_dim: 16, hidden: vec![8, 6], num_classes: 3 };
    let mut rng = common::rng(5);
    let inputs = common::random_batch(&arch, 30, &mut rng);
    let split = Split { inputs, labels: (0..30).map(|i| i % 3).collect() };
    let cfg = TrainConfig { iters: 25, batch_size: 8, ..TrainConfig::default() };
    let run = || {
        let mut p = common::random_model(&arch, 9);
        fine_tune(&mut p, &split, &cfg, 4).unwrap();
        p.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}
