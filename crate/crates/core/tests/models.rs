mod common;

use metaprune::model::{unit_importance, Criterion, GateScores, Mask, ModelArch, ModelParams};
use metaprune::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn arch_strategy() -> impl Strategy<Value = ModelArch> {
    (0usize..3, 2usize..5).prop_map(|(i, m)| common::small_archs(m).swap_remove(i))
}

/// Parameter count written out per architecture from the kept widths.
fn analytic_params(arch: &ModelArch, w: &[usize]) -> usize {
    match arch {
        ModelArch::Mlp { input_dim, num_classes, .. } => {
            let mut dims = vec![*input_dim];
            dims.extend_from_slice(w);
            dims.push(*num_classes);
            dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
        }
        ModelArch::ConvNet { in_channels, kernel, num_classes, .. } => {
            let mut prev = *in_channels;
            let mut n = 0;
            for &f in w {
                n += prev * f * kernel * kernel + f;
                prev = f;
            }
            n + prev * num_classes + num_classes
        }
        ModelArch::Transformer { side, patch, d_model: d, head_dim, num_classes, .. } => {
            let t = (side / patch) * (side / patch);
            let mut n = patch * patch * d + d + t * d;
            for b in w.chunks(2) {
                let hw = b[0] * head_dim;
                n += 3 * (d * hw + hw) + hw * d + d;
                n += d * b[1] + b[1] + b[1] * d + d;
            }
            n + d * num_classes + num_classes
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shrink_matches_masked_forward(arch in arch_strategy(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let p = common::random_model(&arch, seed);
        let mask = common::random_mask(&arch.widths(), &mut rng);
        let x = common::random_batch(&arch, 3, &mut rng);
        let small = p.shrink_to_mask(&mask).unwrap();
        let a = small.forward(&x).unwrap();
        let b = p.masked_forward(&mask, None, &x).unwrap();
        prop_assert!(common::max_abs_diff(a.data(), b.data()) <= 1e-9);
        prop_assert_eq!(small.param_count(), analytic_params(&arch, &mask.counts()));
    }

    #[test]
    fn zero_gate_equals_removing_the_unit(arch in arch_strategy(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let p = common::random_model(&arch, seed);
        let widths = arch.widths();
        let mask = Mask::full(&widths);
        let mut gates: Vec<Vec<f64>> = widths.iter().map(|&n| (0..n).map(|_| rng.gen_range(0.2..1.5)).collect()).collect();
        let layer = rng.gen_range(0..widths.len());
        let unit = rng.gen_range(0..widths[layer]);
        gates[layer][unit] = 0.0;
        let x = common::random_batch(&arch, 3, &mut rng);
        let gated = p.masked_forward(&mask, Some(&GateScores::new(gates.clone())), &x).unwrap();

        let mut kept: Vec<Vec<usize>> = widths.iter().map(|&n| (0..n).collect()).collect();
        kept[layer].retain(|&u| u != unit);
        gates[layer].remove(unit);
        let smaller = Mask::new(widths.clone(), kept).unwrap();
        let removed = p.masked_forward(&smaller, Some(&GateScores::new(gates)), &x).unwrap();
        prop_assert!(common::max_abs_diff(gated.data(), removed.data()) <= 1e-9);
    }

    #[test]
    fn folded_gates_reproduce_gated_logits(arch in arch_strategy(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let p = common::random_model(&arch, seed);
        let widths = arch.widths();
        let gates = GateScores::new(widths.iter().map(|&n| (0..n).map(|_| rng.gen_range(-1.0..1.5)).collect()).collect());
        let x = common::random_batch(&arch, 2, &mut rng);
        let gated = p.masked_forward(&Mask::full(&widths), Some(&gates), &x).unwrap();
        let mut folded = p.clone();
        folded.fold_gates(&gates).unwrap();
        prop_assert!(common::max_abs_diff(folded.forward(&x).unwrap().data(), gated.data()) <= 1e-9);
    }

    #[test]
    fn importance_is_permutation_equivariant(arch in arch_strategy(), seed in any::<u64>(), taylor in any::<bool>()) {
        let mut rng = common::rng(seed);
        let p = common::random_model(&arch, seed);
        let widths = arch.widths();
        let layer = rng.gen_range(0..widths.len());
        let mut perm: Vec<usize> = (0..widths[layer]).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut units: Vec<Vec<usize>> = widths.iter().map(|&n| (0..n).collect()).collect();
        units[layer] = perm.clone();
        let q = p.select_units(&units).unwrap();
        let x = common::random_batch(&arch, 6, &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..arch.num_classes())).collect();
        let c = if taylor { Criterion::Taylor } else { Criterion::Activation };
        let full = Mask::full(&widths);
        let a = unit_importance(c, &p, &full, &x, &labels).unwrap();
        let b = unit_importance(c, &q, &full, &x, &labels).unwrap();
        for (j, &orig) in perm.iter().enumerate() {
            prop_assert!((b[layer][j] - a[layer][orig]).abs() <= 1e-9 * (1.0 + a[layer][orig].abs()));
        }
    }
}

#[test]
fn importance_rejects_empty_data() {
    let arch = common::small_archs(3).swap_remove(0);
    let p = common::random_model(&arch, 0);
    let x = Tensor::zeros(vec![0, 16]);
    assert!(unit_importance(Criterion::Activation, &p, &Mask::full(&arch.widths()), &x, &[]).is_err());
}

fn mean_ce(p: &ModelParams, mask: &Mask, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = p.masked_forward(mask, None, x).unwrap();
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            m + z.ln() - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn top_quartile(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(scores.len() / 4);
    order
}

#[test]
fn taylor_ranking_tracks_leave_one_out() {
    // Retraining-free leave-one-out: the loss change from deleting each unit.
    let mut hits = 0;
    let mut total = 0;
    for seed in 0..10 {
        let arch = ModelArch::Mlp { input_dim: 16, hidden: vec![32, 32], num_classes: 4 };
        let mut rng = common::rng(100 + seed);
        let p = common::random_model(&arch, seed);
        let x = common::random_batch(&arch, 64, &mut rng);
        let labels: Vec<usize> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let full = Mask::full(&arch.widths());
        let base = mean_ce(&p, &full, &x, &labels);
        let taylor = unit_importance(Criterion::Taylor, &p, &full, &x, &labels).unwrap();
        for (l, &n) in arch.widths().iter().enumerate() {
            let loo: Vec<f64> = (0..n)
                .map(|u| {
                    let mut kept: Vec<Vec<usize>> = arch.widths().iter().map(|&w| (0..w).collect()).collect();
                    kept[l].retain(|&k| k != u);
                    (mean_ce(&p, &Mask::new(arch.widths(), kept).unwrap(), &x, &labels) - base).abs()
                })
                .collect();
            let a = top_quartile(&taylor[l]);
            let b = top_quartile(&loo);
            hits += a.iter().filter(|u| b.contains(u)).count();
            total += a.len();
        }
    }
    let agreement = hits as f64 / total as f64;
    assert!(agreement >= 0.6, "top-quartile agreement {agreement:.3}");
}
