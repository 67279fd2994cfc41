mod common;

use metaprune::model::{Criterion, ModelArch};
use metaprune::pruning::{ahnp, ifp, ifp_schedule, random_mask, random_prune, removal_count, AhnpConfig, IfpConfig, PruneResult};
use metaprune::train::{fine_tune, TrainConfig};
use metaprune::Error;
use proptest::prelude::*;

fn small_ifp(r: f64) -> IfpConfig {
    IfpConfig { iters: 60, period: 5, batch_size: 16, score_batch: 16, ..IfpConfig::new(common::target(r)) }
}

fn check_trace(res: &PruneResult, widths: &[usize], r: f64) {
    let targets = common::target(r).keep_counts(widths);
    let mut prev = widths.to_vec();
    for row in &res.trace {
        for l in 0..widths.len() {
            assert!(row.kept[l] <= prev[l], "kept count grew at iteration {}", row.iteration);
            assert!(row.kept[l] >= targets[l], "below target at iteration {}", row.iteration);
        }
        prev = row.kept.clone();
    }
    assert_eq!(res.mask.counts(), targets);
    assert_eq!(res.params.arch().widths(), targets);
}

#[test]
fn schedule_oracle() {
    assert_eq!(ifp_schedule(100, 20.0, 10), vec![100, 80, 64, 51, 40, 32, 25, 20, 16, 12, 10]);
}

proptest! {
    #[test]
    fn schedule_never_undershoots(n in 2usize..300, p in 0.5f64..99.5, r in 0.05f64..0.95) {
        let t = common::target(r).keep(n);
        let s = ifp_schedule(n, p, t);
        prop_assert_eq!(s[0], n);
        prop_assert_eq!(*s.last().unwrap(), t);
        prop_assert!(s.windows(2).all(|w| w[1] < w[0] && w[1] >= t));
        prop_assert!(s.windows(2).all(|w| w[0] - w[1] == removal_count(w[0], p, t)));
    }
}

#[test]
fn ifp_invariants_on_every_architecture() {
    let data = common::tiny_task(1);
    for arch in common::small_archs(4) {
        let pre = common::random_model(&arch, 2);
        for r in [0.5, 0.9] {
            let a = ifp(&pre, &data, &small_ifp(r), 7).unwrap();
            check_trace(&a, &arch.widths(), r);
            let t = ifp(&pre, &data, &IfpConfig { criterion: Criterion::Taylor, ..small_ifp(r) }, 7).unwrap();
            assert_eq!(a.mask.counts(), t.mask.counts());
            let again = ifp(&pre, &data, &small_ifp(r), 7).unwrap();
            assert_eq!(a.mask, again.mask);
            assert_eq!(a.params, again.params);
        }
    }
}

#[test]
fn ifp_rejects_unreachable_targets_before_running() {
    let data = common::tiny_task(1);
    let pre = common::random_model(&ModelArch::Mlp { input_dim: 16, hidden: vec![100], num_classes: 4 }, 0);
    let cfg = IfpConfig { iters: 100, period: 20, ..IfpConfig::new(common::target(0.9)) };
    assert!(matches!(ifp(&pre, &data, &cfg, 0), Err(Error::Config(_))));
}

#[test]
fn ahnp_invariants() {
    let data = common::tiny_task(2);
    for arch in [common::small_archs(4).swap_remove(0), common::small_archs(4).swap_remove(2)] {
        let pre = common::random_model(&arch, 3);
        let cfg = AhnpConfig { iters: 40, finetune_iters: 10, batch_size: 16, ..AhnpConfig::new(common::target(0.6)) };
        let a = ahnp(&pre, &data, &cfg, 5).unwrap();
        check_trace(&a, &arch.widths(), 0.6);
        let b = ahnp(&pre, &data, &cfg, 5).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn ahnp_force_prune_breaks_ties_by_index() {
    // Gates never move, so every score stays 1 and the fallback keeps the
    // highest indices.
    let data = common::tiny_task(2);
    let arch = ModelArch::Mlp { input_dim: 16, hidden: vec![6, 5], num_classes: 3 };
    let pre = common::random_model(&arch, 3);
    let cfg = AhnpConfig {
        iters: 5,
        finetune_iters: 0,
        lr_gates: 0.0,
        l1: 0.0,
        gate_threshold: 0.0,
        batch_size: 16,
        ..AhnpConfig::new(common::target(0.5))
    };
    let res = ahnp(&pre, &data, &cfg, 1).unwrap();
    assert_eq!(res.mask.layers(), &[vec![3, 4, 5], vec![2, 3, 4]]);
}

#[test]
fn strong_l1_drives_gates_below_threshold() {
    let data = common::tiny_task(4);
    let arch = ModelArch::Mlp { input_dim: 16, hidden: vec![16, 16], num_classes: 3 };
    let pre = common::random_model(&arch, 1);
    let cfg = AhnpConfig { iters: 200, finetune_iters: 0, l1: 10.0, batch_size: 16, ..AhnpConfig::new(common::target(0.9)) };
    let res = ahnp(&pre, &data, &cfg, 0).unwrap();
    // The last gated step's counts come from thresholding alone.
    let gated = res.trace.last().unwrap();
    assert!(gated.iteration <= 200);
    assert!(gated.kept.iter().all(|&k| k <= 8), "{:?}", gated.kept);
}

#[test]
fn random_masks_differ_across_seeds() {
    let t = common::target(0.9);
    let a = random_mask(&[20, 20], t, 1).unwrap();
    let b = random_mask(&[20, 20], t, 2).unwrap();
    assert_eq!(a.counts(), vec![2, 2]);
    assert_ne!(a, b);
}

#[test]
fn random_prune_at_tiny_ratio_is_plain_fine_tuning() {
    // keep(n) = n for every layer when r is small enough.
    let data = common::tiny_task(5);
    let arch = ModelArch::Mlp { input_dim: 16, hidden: vec![6, 5], num_classes: 3 };
    let pre = common::random_model(&arch, 3);
    let train = TrainConfig { iters: 20, batch_size: 16, ..TrainConfig::default() };
    let t = common::target(0.01);
    let res = random_prune(&pre, &data, t, &train, 9).unwrap();
    assert!(res.mask.is_full());
    let mut plain = pre.clone();
    plain.reinit_classifier(3, metaprune::seed::derive_tag(9, "head"));
    fine_tune(&mut plain, &data.train, &train, metaprune::seed::derive_tag(9, "batches")).unwrap();
    assert_eq!(res.params, plain);
}
