//! Meta-vote pruning: neighbour masks vote for units, a tempered softmax over
//! the votes drives mask sampling, and kept units start from the average of
//! the neighbours' weights for them.

use rand::Rng;

use crate::error::{contract, Result};
use crate::model::{axis_indices, Mask, ModelParams};
use crate::pruning::{PruneResult, PruneTarget};
use crate::seed;
use crate::taskgen::DatasetSplit;
use crate::train::{accuracy, fine_tune, TrainConfig};

/// `v[ℓ][k]`: how many neighbour masks keep unit `k` of layer `ℓ`.
pub fn tally_votes(masks: &[&Mask], widths: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut v: Vec<Vec<usize>> = widths.iter().map(|&n| vec![0; n]).collect();
    for (j, m) in masks.iter().enumerate() {
        if m.widths() != widths {
            return Err(contract(format!("neighbour mask {j} has widths {:?}, expected {widths:?}", m.widths())));
        }
        for (l, kept) in m.layers().iter().enumerate() {
            for &k in kept {
                v[l][k] += 1;
            }
        }
    }
    Ok(v)
}

/// `p(k) = exp(v[k]/τ) / Σ_h exp(v[h]/τ)`, evaluated with the maximum
/// subtracted for stability.
pub fn vote_distribution(votes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(contract(format!("vote temperature must be positive, got {temperature}")));
    }
    if votes.is_empty() {
        return Err(contract("vote distribution over an empty layer"));
    }
    let max = *votes.iter().max().expect("non-empty") as f64;
    let mut p: Vec<f64> = votes.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Draws `keep` distinct indices: sample from `p`, drop the drawn index,
/// renormalize, repeat. Returned in ascending order.
pub fn sample_without_replacement(p: &[f64], keep: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut w = p.to_vec();
    let mut out = Vec::with_capacity(keep);
    for _ in 0..keep.min(p.len()) {
        let total: f64 = w.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < wi {
                break;
            }
            u -= wi;
        }
        let i = pick.expect("weights remain while fewer than n indices are drawn");
        out.push(i);
        w[i] = 0.0;
    }
    out.sort_unstable();
    out
}

/// One sampled mask at the target size, with an independent stream per layer.
pub fn sample_mask(dists: &[Vec<f64>], target: PruneTarget, seed: u64) -> Result<Mask> {
    let widths: Vec<usize> = dists.iter().map(Vec::len).collect();
    let kept = dists
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let mut rng = seed::rng(seed::derive(seed::derive_tag(seed, "vote-sample"), l as u64));
            sample_without_replacement(p, target.keep(p.len()), &mut rng)
        })
        .collect();
    Mask::new(widths, kept)
}

/// Compact model for `mask` whose every parameter element is the mean of that
/// element over the donors that kept all units the element belongs to, or the
/// pretrained value when no donor did. Unit-free shared tensors average over
/// all donors. The classifier is freshly initialized for `num_classes`.
pub fn init_weights(
    pretrained: &ModelParams,
    mask: &Mask,
    donors: &[(&Mask, &ModelParams)],
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    pretrained.check_mask(mask)?;
    for (j, (m, p)) in donors.iter().enumerate() {
        pretrained.check_mask(m)?;
        if p.arch().widths() != m.counts() {
            return Err(contract(format!("donor {j} weights do not match its mask")));
        }
    }
    let mut model = pretrained.shrink_to_mask(mask)?;
    // Position of each original unit inside every donor's compact model.
    let positions: Vec<Vec<Vec<Option<usize>>>> = donors
        .iter()
        .map(|(m, _)| {
            m.widths()
                .iter()
                .zip(m.layers())
                .map(|(&n, kept)| {
                    let mut pos = vec![None; n];
                    for (c, &u) in kept.iter().enumerate() {
                        pos[u] = Some(c);
                    }
                    pos
                })
                .collect()
        })
        .collect();
    let specs = pretrained.specs();
    let donor_specs: Vec<_> = donors.iter().map(|(_, p)| p.specs()).collect();
    let orig_idx_all: Vec<Vec<Vec<usize>>> = specs.iter().map(|s| axis_indices(s, mask.layers())).collect();
    for (ti, spec) in specs.iter().enumerate() {
        if spec.classifier {
            continue;
        }
        let orig_idx = &orig_idx_all[ti];
        let shape: Vec<usize> = orig_idx.iter().map(Vec::len).collect();
        let rank = shape.len();
        let mut means = model.tensors()[ti].data().to_vec();
        let mut counts = vec![0usize; means.len()];
        for (j, (_, dp)) in donors.iter().enumerate() {
            let dshape = &donor_specs[j][ti].shape;
            let dstrides = crate::model::strides(dshape);
            let ddata = dp.tensors()[ti].data();
            let mut multi = vec![0usize; rank];
            for flat in 0..means.len() {
                // Row-major decode of the compact target position.
                let mut rem = flat;
                for a in (0..rank).rev() {
                    multi[a] = rem % shape[a];
                    rem /= shape[a];
                }
                let mut doff = 0;
                let mut present = true;
                for a in 0..rank {
                    let orig = orig_idx[a][multi[a]];
                    let coord = match spec.axes[a] {
                        None => orig,
                        Some(o) => match positions[j][o.layer][orig / o.block] {
                            Some(c) => c * o.block + orig % o.block,
                            None => {
                                present = false;
                                break;
                            }
                        },
                    };
                    doff += coord * dstrides[a];
                }
                if present {
                    // Running mean: identical donor values come back exactly.
                    counts[flat] += 1;
                    let x = ddata[doff];
                    means[flat] = if counts[flat] == 1 { x } else { means[flat] + (x - means[flat]) / counts[flat] as f64 };
                }
            }
        }
        model.tensors_mut()[ti].data_mut().copy_from_slice(&means);
    }
    model.reinit_classifier(num_classes, seed::derive_tag(seed, "head"));
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MvpConfig {
    /// Neighbour count `N`.
    pub neighbours: usize,
    pub temperature: f64,
    pub target: PruneTarget,
    /// Fine-tuning iterations `J` plus batch size and learning rate.
    pub train: TrainConfig,
}

impl MvpConfig {
    pub fn new(target: PruneTarget) -> Self {
        Self { neighbours: 3, temperature: 1.0, target, train: TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbours == 0 {
            return Err(crate::Error::Config("MVP needs at least one neighbour".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(crate::Error::Config(format!("vote temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Vote, sample, initialize: the pruned starting point of MVP before
/// fine-tuning. `donors` are the already-selected neighbours.
pub fn mvp_init(
    pretrained: &ModelParams,
    donors: &[(&Mask, &ModelParams)],
    num_classes: usize,
    cfg: &MvpConfig,
    seed: u64,
) -> Result<(Mask, ModelParams)> {
    cfg.validate()?;
    if donors.is_empty() {
        return Err(contract("MVP needs at least one neighbour record"));
    }
    let widths = pretrained.arch().widths();
    let masks: Vec<&Mask> = donors.iter().map(|(m, _)| *m).collect();
    let votes = tally_votes(&masks, &widths)?;
    let dists = votes.iter().map(|v| vote_distribution(v, cfg.temperature)).collect::<Result<Vec<_>>>()?;
    let mask = sample_mask(&dists, cfg.target, seed)?;
    let model = init_weights(pretrained, &mask, donors, num_classes, seed)?;
    Ok((mask, model))
}

/// Full MVP for one task given its neighbour records: vote, sample, donor
/// initialization, then `J` iterations of fine-tuning.
pub fn mvp(
    pretrained: &ModelParams,
    donors: &[(&Mask, &ModelParams)],
    data: &DatasetSplit,
    cfg: &MvpConfig,
    seed: u64,
) -> Result<PruneResult> {
    let (mask, mut model) = mvp_init(pretrained, donors, data.num_classes(), cfg, seed)?;
    let trace = fine_tune(&mut model, &data.train, &cfg.train, seed::derive_tag(seed, "batches"))?;
    let accuracy = accuracy(&model, &data.test)?;
    Ok(PruneResult { mask, params: model, trace, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_counts() {
        let a = Mask::new(vec![4], vec![vec![0, 1]]).unwrap();
        let b = Mask::new(vec![4], vec![vec![1, 2]]).unwrap();
        let c = Mask::new(vec![4], vec![vec![1, 3]]).unwrap();
        assert_eq!(tally_votes(&[&a, &b, &c], &[4]).unwrap(), vec![vec![1, 3, 1, 1]]);
        assert!(tally_votes(&[&a], &[5]).is_err());
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(vote_distribution(&[1, 2], 0.0).is_err());
        assert!(vote_distribution(&[1, 2], -1.0).is_err());
        let p = vote_distribution(&[2, 2, 2], 1.0).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn full_keep_returns_all() {
        let mut rng = seed::rng(0);
        assert_eq!(sample_without_replacement(&[0.7, 0.2, 0.1], 3, &mut rng), vec![0, 1, 2]);
    }
}
