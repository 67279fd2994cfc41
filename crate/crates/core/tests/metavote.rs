mod common;

use metaprune::metavote::{init_weights, mvp, mvp_init, sample_mask, sample_without_replacement, tally_votes, vote_distribution, MvpConfig};
use metaprune::model::{Mask, ModelArch};
use metaprune::train::TrainConfig;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn eq1_frozen_values() {
    let p = vote_distribution(&[3, 1, 0, 2], 1.0).unwrap();
    for (a, b) in p.iter().zip([0.643914, 0.087144, 0.032059, 0.236883]) {
        assert!((a - b).abs() < 1e-6, "{p:?}");
    }
}

#[test]
fn eq1_matches_direct_evaluation() {
    let mut rng = common::rng(1);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let big_n = rng.gen_range(1..=10);
        let votes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=big_n)).collect();
        for tau in [0.25, 1.0, 4.0] {
            let p = vote_distribution(&votes, tau).unwrap();
            let q = common::direct_vote_distribution(&votes, tau);
            assert!(common::max_abs_diff(&p, &q) <= 1e-12);
        }
    }
}

fn argmax(p: &[f64]) -> Vec<usize> {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..p.len()).filter(|&i| p[i] == m).collect()
}

proptest! {
    #[test]
    fn votes_order_probabilities(votes in prop::collection::vec(0usize..=10, 1..64), tau in 0.1f64..5.0) {
        let p = vote_distribution(&votes, tau).unwrap();
        for i in 0..votes.len() {
            for j in 0..votes.len() {
                if votes[i] > votes[j] {
                    prop_assert!(p[i] > p[j]);
                } else if votes[i] == votes[j] {
                    prop_assert_eq!(p[i], p[j]);
                }
            }
        }
        let base = argmax(&vote_distribution(&votes, 1.0).unwrap());
        prop_assert_eq!(argmax(&p), base);
    }

    #[test]
    fn sampled_masks_have_target_size(widths in prop::collection::vec(1usize..80, 1..4), seed in any::<u64>()) {
        for r in [0.5, 0.85, 0.9, 0.95] {
            let t = common::target(r);
            let dists: Vec<Vec<f64>> = widths.iter().map(|&n| vote_distribution(&vec![1; n], 1.0).unwrap()).collect();
            let m = sample_mask(&dists, t, seed).unwrap();
            for (k, &n) in m.counts().iter().zip(&widths) {
                let want = (((1.0 - r) * n as f64 - 1e-9).ceil() as usize).max(1);
                prop_assert_eq!(*k, want);
            }
        }
    }
}

#[test]
fn sampling_matches_enumeration() {
    let p = vote_distribution(&[2, 1, 0, 1, 0], 1.0).unwrap();
    let exact = common::sequential_inclusion(&p, 2);
    // Frozen from an independent evaluation of the same process.
    for (a, b) in exact.iter().zip([0.794291, 0.433217, 0.169637, 0.433217, 0.169637]) {
        assert!((a - b).abs() < 1e-6);
    }
    let draws = 100_000;
    let mut hits = [0usize; 5];
    let t = common::target(0.6);
    for s in 0..draws {
        let m = sample_mask(&[p.clone()], t, s).unwrap();
        for &k in m.kept(0) {
            hits[k] += 1;
        }
    }
    for (h, e) in hits.iter().zip(&exact) {
        assert!((*h as f64 / draws as f64 - e).abs() < 0.01, "{hits:?} vs {exact:?}");
    }
}

#[test]
fn zero_probability_units_are_never_drawn_early() {
    let mut rng = common::rng(0);
    for _ in 0..100 {
        let s = sample_without_replacement(&[0.5, 0.0, 0.5], 2, &mut rng);
        assert_eq!(s, vec![0, 2]);
    }
}

fn arch() -> ModelArch {
    ModelArch::Mlp { input_dim: 16, hidden: vec![6, 5], num_classes: 3 }
}

fn non_head_equal(a: &metaprune::model::ModelParams, b: &metaprune::model::ModelParams) -> bool {
    a.specs().iter().zip(a.tensors().iter().zip(b.tensors())).all(|(s, (x, y))| s.classifier || x.data() == y.data())
}

#[test]
fn init_weights_examples() {
    let pre = common::random_model(&arch(), 1);
    let mut rng = common::rng(2);
    let mask = common::random_mask(&arch().widths(), &mut rng);

    // No donor: the pretrained slice, bit for bit.
    let none = init_weights(&pre, &mask, &[], 3, 0).unwrap();
    assert!(non_head_equal(&none, &pre.shrink_to_mask(&mask).unwrap()));

    // One donor that kept everything the target keeps: copied verbatim.
    let donor_full = common::random_model(&arch(), 7);
    let full = Mask::full(&arch().widths());
    let one = init_weights(&pre, &mask, &[(&full, &donor_full)], 3, 0).unwrap();
    assert!(non_head_equal(&one, &donor_full.shrink_to_mask(&mask).unwrap()));

    // Donors w and −w average to zero.
    let mut neg = donor_full.clone();
    neg.tensors_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = -*v));
    let zero = init_weights(&pre, &mask, &[(&full, &donor_full), (&full, &neg)], 3, 0).unwrap();
    for (s, t) in zero.specs().iter().zip(zero.tensors()) {
        if !s.classifier {
            assert!(t.data().iter().all(|&v| v == 0.0), "{}", s.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identical_donors_give_their_weights(seed in any::<u64>(), donors in 1usize..5) {
        let pre = common::random_model(&arch(), seed);
        let mut rng = common::rng(seed);
        let target_mask = common::random_mask(&arch().widths(), &mut rng);
        let donor_mask = common::random_mask(&arch().widths(), &mut rng);
        let shared = common::random_model(&arch(), seed ^ 1);
        let compact = shared.shrink_to_mask(&donor_mask).unwrap();
        let list: Vec<_> = (0..donors).map(|_| (&donor_mask, &compact)).collect();
        let init = init_weights(&pre, &target_mask, &list, 3, 0).unwrap();
        // Where the donors kept every unit an element touches, the element is
        // the shared value; elsewhere it is the pretrained one.
        let both = Mask::new(
            arch().widths(),
            (0..2).map(|l| {
                let k: Vec<usize> = target_mask.kept(l).iter().copied().filter(|u| donor_mask.contains(l, *u)).collect();
                if k.is_empty() { target_mask.kept(l).to_vec() } else { k }
            }).collect(),
        ).unwrap();
        let expect_first = shared.shrink_to_mask(&both).unwrap();
        let got = init.tensors()[0].data();
        let rows = 16;
        let cols_t = target_mask.kept(0).len();
        let cols_e = both.kept(0).len();
        for (ce, u) in both.kept(0).iter().enumerate() {
            if !donor_mask.contains(0, *u) { continue; }
            let ct = target_mask.kept(0).iter().position(|x| x == u).unwrap();
            for r in 0..rows {
                prop_assert_eq!(got[r * cols_t + ct], expect_first.tensors()[0].data()[r * cols_e + ce]);
            }
        }
    }
}

#[test]
fn mvp_is_deterministic_and_j0_returns_the_init() {
    let data = common::tiny_task(3);
    let pre = common::random_model(&arch(), 1);
    let mut rng = common::rng(4);
    let records: Vec<(Mask, metaprune::model::ModelParams)> = (0..3)
        .map(|i| {
            let m = common::random_mask(&arch().widths(), &mut rng);
            let p = common::random_model(&arch(), 10 + i).shrink_to_mask(&m).unwrap();
            (m, p)
        })
        .collect();
    let donors: Vec<_> = records.iter().map(|(m, p)| (m, p)).collect();
    let cfg = MvpConfig { train: TrainConfig { iters: 0, batch_size: 16, ..TrainConfig::default() }, ..MvpConfig::new(common::target(0.5)) };
    let a = mvp(&pre, &donors, &data, &cfg, 5).unwrap();
    let (mask, init) = mvp_init(&pre, &donors, 3, &cfg, 5).unwrap();
    assert_eq!(a.mask, mask);
    assert_eq!(a.params, init);
    let trained = MvpConfig { train: TrainConfig { iters: 10, ..cfg.train }, ..cfg };
    let b = mvp(&pre, &donors, &data, &trained, 5).unwrap();
    let c = mvp(&pre, &donors, &data, &trained, 5).unwrap();
    assert_eq!(b.params, c.params);
    assert_eq!(b.mask, a.mask);
}

#[test]
fn unanimous_votes_with_low_temperature_pick_the_voted_units() {
    let m = Mask::new(vec![20], vec![vec![3, 7]]).unwrap();
    let votes = tally_votes(&[&m, &m, &m], &[20]).unwrap();
    let p = vote_distribution(&votes[0], 0.05).unwrap();
    let s = sample_mask(&[p], common::target(0.9), 0).unwrap();
    assert_eq!(s.kept(0), &[3, 7]);
}
