use super::{batch_seed, finish, lowest, shrink_with_state, survivors, task_model, PruneResult, PruneTarget};
use crate::error::{Error, Result};
use crate::model::{unit_importance, Criterion, Mask, ModelParams};
use crate::seed;
use crate::taskgen::DatasetSplit;
use crate::tensor::{LrSchedule, Optimizer};
use crate::train::{backprop, Sampler, TraceRow};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IfpConfig {
    /// Total training iterations `J`.
    pub iters: usize,
    /// A prune event happens after every `period` iterations (`h`).
    pub period: usize,
    /// Share of the remaining units removed per event, in percent (`p`).
    pub percent: f64,
    pub criterion: Criterion,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub target: PruneTarget,
    /// Held-out samples used to score units at each event.
    pub score_batch: usize,
}

impl IfpConfig {
    pub fn new(target: PruneTarget) -> Self {
        Self {
            iters: 500,
            period: 20,
            percent: 20.0,
            criterion: Criterion::Activation,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            target,
            score_batch: 256,
        }
    }

    /// Checks ranges and that every layer can reach its target within the
    /// `floor(J/h)` available prune events.
    pub fn validate(&self, widths: &[usize]) -> Result<()> {
        if self.iters == 0 || self.period == 0 || self.batch_size == 0 || self.score_batch == 0 {
            return Err(Error::Config("IFP needs J, h, batch size and score batch >= 1".into()));
        }
        if !(self.percent > 0.0 && self.percent < 100.0) {
            return Err(Error::Config(format!("IFP prune percentage must lie in (0, 100), got {}", self.percent)));
        }
        let events = self.iters / self.period;
        for (l, &n) in widths.iter().enumerate() {
            let needed = ifp_schedule(n, self.percent, self.target.keep(n)).len() - 1;
            if needed > events {
                return Err(Error::Config(format!(
                    "layer {l} needs {needed} prune events to go from {n} to {} units, but J={} and h={} allow {events}",
                    self.target.keep(n),
                    self.iters,
                    self.period
                )));
            }
        }
        Ok(())
    }
}

/// Units removed at one event: `ceil(p·k/100)` clamped to `[1, k − target]`.
pub fn removal_count(k: usize, percent: f64, target: usize) -> usize {
    if k <= target {
        return 0;
    }
    let raw = (percent * k as f64 / 100.0 - 1e-9).ceil() as usize;
    raw.clamp(1, k - target)
}

/// Kept-count trajectory from `n` down to `target`, one entry per event.
pub fn ifp_schedule(n: usize, percent: f64, target: usize) -> Vec<usize> {
    let mut seq = vec![n];
    let mut k = n;
    while k > target {
        k -= removal_count(k, percent, target);
        seq.push(k);
    }
    seq
}

/// Iterative filter pruning: SGD on the task with a fresh classifier, and
/// every `h` iterations the lowest-importance `p%` of each layer's remaining
/// units are removed until every layer sits at its target size.
pub fn ifp(pretrained: &ModelParams, data: &DatasetSplit, cfg: &IfpConfig, seed: u64) -> Result<PruneResult> {
    let widths = pretrained.arch().widths();
    cfg.validate(&widths)?;
    let targets = cfg.target.keep_counts(&widths);
    let mut model = task_model(pretrained, data.num_classes(), seed);
    let mut mask = Mask::full(&widths);
    let sched = LrSchedule::new(cfg.lr, 0.0, cfg.iters)?;
    let mut opt = Optimizer::sgd(cfg.momentum);
    let mut sampler = Sampler::new(data.train.len(), cfg.batch_size, batch_seed(seed))?;
    let all: Vec<usize> = (0..model.tensors().len()).collect();
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut event = 0u64;
    for it in 0..cfg.iters {
        let batch = data.train.batch(&sampler.next_batch())?;
        let loss = backprop(&mut model, &batch, None)?;
        let lr = sched.lr(it)?;
        opt.step(model.tensors_mut().iter_mut(), lr)?;
        if (it + 1) % cfg.period == 0 && mask.counts() != targets {
            let score = data.val.subsample(cfg.score_batch, seed::derive(seed::derive_tag(seed, "score"), event))?;
            event += 1;
            let compact = model.arch().widths();
            let scores = unit_importance(cfg.criterion, &model, &Mask::full(&compact), &score.inputs, &score.labels)?;
            let keep: Vec<Vec<usize>> = compact
                .iter()
                .zip(&targets)
                .zip(&scores)
                .map(|((&k, &t), s)| survivors(k, &lowest(s, removal_count(k, cfg.percent, t))))
                .collect();
            shrink_with_state(&mut model, &keep, &mut [(&mut opt, &all)])?;
            mask = mask.compose(&Mask::new(compact, keep)?)?;
        }
        trace.push(TraceRow { iteration: it + 1, loss, lr, kept: mask.counts() });
    }
    finish(mask, model, trace, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_recurrence() {
        assert_eq!(ifp_schedule(100, 20.0, 10), vec![100, 80, 64, 51, 40, 32, 25, 20, 16, 12, 10]);
        assert_eq!(ifp_schedule(20, 20.0, 2), vec![20, 16, 12, 9, 7, 5, 4, 3, 2]);
        assert_eq!(ifp_schedule(5, 20.0, 5), vec![5]);
    }

    #[test]
    fn unreachable_target_is_a_config_error() {
        let mut cfg = IfpConfig::new(PruneTarget::new(0.9).unwrap());
        cfg.iters = 100;
        cfg.period = 20;
        assert!(matches!(cfg.validate(&[100]), Err(Error::Config(_))));
        cfg.iters = 200;
        assert!(cfg.validate(&[100]).is_ok());
    }
}
