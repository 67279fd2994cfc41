//! Zoo-building pruning procedures: iterative filter pruning, gated head and
//! node pruning, and the random baseline.

mod ahnp;
mod ifp;

pub use ahnp::{ahnp, AhnpConfig};
pub use ifp::{ifp, ifp_schedule, removal_count, IfpConfig};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::model::{axis_indices, gather, Mask, ModelParams};
use crate::seed;
use crate::taskgen::DatasetSplit;
use crate::tensor::{Optimizer, Tensor};
use crate::train::{accuracy, fine_tune, TraceRow, TrainConfig};

/// Per-layer pruning ratio `r`: the fraction of units removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneTarget {
    r: f64,
}

impl PruneTarget {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("pruning ratio must lie in (0, 1), got {r}")));
        }
        Ok(Self { r })
    }

    pub fn ratio(&self) -> f64 {
        self.r
    }

    /// `max(1, ceil((1 − r)·n))`.
    pub fn keep(&self, n: usize) -> usize {
        // Shave rounding noise so that e.g. (1 − 0.9)·20 stays 2.
        (((1.0 - self.r) * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }

    pub fn keep_counts(&self, widths: &[usize]) -> Vec<usize> {
        widths.iter().map(|&n| self.keep(n)).collect()
    }
}

/// Outcome of pruning one task.
#[derive(Clone, Debug)]
pub struct PruneResult {
    /// Kept units in the pretrained model's index space.
    pub mask: Mask,
    /// Compact weights, one unit per kept index.
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    /// Accuracy on the task's test split.
    pub accuracy: f64,
}

/// Copy of `pretrained` with a fresh classifier for `num_classes` outputs.
pub fn task_model(pretrained: &ModelParams, num_classes: usize, seed: u64) -> ModelParams {
    let mut m = pretrained.clone();
    m.reinit_classifier(num_classes, seed::derive_tag(seed, "head"));
    m
}

pub(crate) fn batch_seed(seed: u64) -> u64 {
    seed::derive_tag(seed, "batches")
}

/// Indices of the `count` lowest scores, lowest index first among ties.
pub(crate) fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Complement of `removed` within `0..n`, ascending.
pub(crate) fn survivors(n: usize, removed: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !removed.contains(i)).collect()
}

/// Shrinks `model` to `keep` (compact indices per layer), carrying the
/// optimizer buffers along. `covered[k]` names the tensor that occupies
/// slot `k` of the optimizer.
pub(crate) fn shrink_with_state(
    model: &mut ModelParams,
    keep: &[Vec<usize>],
    optimizers: &mut [(&mut Optimizer, &[usize])],
) -> Result<()> {
    let specs = model.specs();
    for (opt, covered) in optimizers.iter_mut() {
        for (slot, &ti) in covered.iter().enumerate() {
            let spec = &specs[ti];
            let idx = axis_indices(spec, keep);
            opt.remap(slot, |b| gather(b, &spec.shape, &idx));
        }
    }
    *model = model.select_units(keep)?;
    Ok(())
}

pub(crate) fn subset<'a>(tensors: &'a mut [Tensor], idx: &'a [usize]) -> impl Iterator<Item = &'a mut Tensor> + 'a {
    tensors.iter_mut().enumerate().filter(move |(i, _)| idx.contains(i)).map(|(_, t)| t)
}

pub(crate) fn finish(mask: Mask, params: ModelParams, trace: Vec<TraceRow>, data: &DatasetSplit) -> Result<PruneResult> {
    let accuracy = accuracy(&params, &data.test)?;
    Ok(PruneResult { mask, params, trace, accuracy })
}

/// Uniformly random mask of the target size, one independent draw per layer.
pub fn random_mask(widths: &[usize], target: PruneTarget, seed: u64) -> Result<Mask> {
    let kept = widths
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            let mut rng = seed::rng(seed::derive(seed::derive_tag(seed, "random-mask"), l as u64));
            index::sample(&mut rng, n, target.keep(n)).into_vec()
        })
        .collect();
    Mask::new(widths.to_vec(), kept)
}

/// Keeps a uniformly random unit subset of the pretrained model, attaches a
/// fresh classifier and fine-tunes.
pub fn random_prune(
    pretrained: &ModelParams,
    data: &DatasetSplit,
    target: PruneTarget,
    train: &TrainConfig,
    seed: u64,
) -> Result<PruneResult> {
    let mask = random_mask(&pretrained.arch().widths(), target, seed)?;
    let mut model = pretrained.shrink_to_mask(&mask)?;
    model.reinit_classifier(data.num_classes(), seed::derive_tag(seed, "head"));
    let trace = fine_tune(&mut model, &data.train, train, batch_seed(seed))?;
    finish(mask, model, trace, data)
}
