//! Mini-batch training and evaluation shared by every pruning procedure.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::model::{trace, ModelParams};
use crate::seed;
use crate::taskgen::Split;
use crate::tensor::{LrSchedule, Optimizer, Tape, Tensor};

/// Epoch-shuffled batch indices, reproducible from one seed.
#[derive(Clone, Debug)]
pub struct Sampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(contract("sampler needs samples and a positive batch size"));
        }
        Ok(Self { n, batch: batch.min(n), order: Vec::new(), pos: 0, rng: seed::rng(seed) })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (self.batch - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// One row of a training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub kept: Vec<usize>,
}

/// Unit gates for the gated forward pass, one `[n_ℓ]` tensor per prunable layer.
pub struct Gates<'a> {
    pub scores: &'a mut [Tensor],
    pub l1: f64,
}

/// Forward and backward on one batch; gradients are accumulated into the
/// parameter (and gate) tensors. Returns the cross-entropy, excluding any L1
/// term.
pub fn backprop(params: &mut ModelParams, batch: &Split, gates: Option<Gates<'_>>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.shape().to_vec(), batch.inputs.data().to_vec())?;
    let (gate_vars, l1) = match &gates {
        Some(g) => (g.scores.iter().map(|t| Some(tape.leaf(t))).collect(), g.l1),
        None => (vec![None; params.arch().num_prunable()], 0.0),
    };
    let out = trace(&mut tape, params, x, &gate_vars, true)?;
    let ce = tape.cross_entropy(out.logits, &batch.labels)?;
    let ce_value = tape.value(ce)[0];
    let mut loss = ce;
    if l1 > 0.0 {
        for v in gate_vars.iter().flatten() {
            let s = tape.sum_abs(*v);
            let s = tape.scale(s, l1);
            loss = tape.add(loss, s)?;
        }
    }
    let mut grads = tape.backward(loss)?;
    grads.write_into(params.tensors_mut().iter_mut(), &out.params)?;
    if let Some(g) = gates {
        let vars: Vec<_> = gate_vars.into_iter().flatten().collect();
        grads.write_into(g.scores.iter_mut(), &vars)?;
    }
    Ok(ce_value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iters: 100, batch_size: 128, lr: 0.01, min_lr: 0.0, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// SGD with momentum under a cosine schedule for `cfg.iters` steps.
pub fn fine_tune(params: &mut ModelParams, data: &Split, cfg: &TrainConfig, seed: u64) -> Result<Vec<TraceRow>> {
    if cfg.iters == 0 {
        return Ok(Vec::new());
    }
    let sched = LrSchedule::new(cfg.lr, cfg.min_lr, cfg.iters)?;
    let mut opt = Optimizer::new(crate::tensor::OptimizerKind::SgdMomentum(crate::tensor::SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    }));
    let mut sampler = Sampler::new(data.len(), cfg.batch_size, seed)?;
    let kept = params.arch().widths();
    let mut rows = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let batch = data.batch(&sampler.next_batch())?;
        let loss = backprop(params, &batch, None)?;
        let lr = sched.lr(it)?;
        opt.step(params.tensors_mut().iter_mut(), lr)?;
        rows.push(TraceRow { iteration: it + 1, loss, lr, kept: kept.clone() });
    }
    Ok(rows)
}

const EVAL_CHUNK: usize = 512;

/// Logits for every row of `inputs`, evaluated in chunks.
pub fn logits(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let mut data = Vec::with_capacity(n * params.arch().num_classes());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        data.extend(params.forward(&inputs.select_rows(&idx)?)?.into_data());
    }
    Tensor::new(vec![n, params.arch().num_classes()], data)
}

/// Row-wise softmax of the logits.
pub fn predict_proba(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let z = logits(params, inputs)?;
    let c = z.shape()[1];
    let mut p = z.into_data();
    for row in p.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![p.len() / c, c], p)
}

/// Fraction of samples whose argmax logit (lowest index on ties) is the label.
pub fn accuracy(params: &ModelParams, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(contract("accuracy of an empty split"));
    }
    let z = logits(params, &split.inputs)?;
    let c = z.shape()[1];
    let correct = z
        .data()
        .chunks(c)
        .zip(&split.labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelArch;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(10, 4, 1).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch()).collect();
        seen.truncate(10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fine_tune_lowers_loss_and_is_deterministic() {
        let arch = ModelArch::Mlp { input_dim: 4, hidden: vec![8], num_classes: 2 };
        let x: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let labels: Vec<usize> = x.chunks(4).map(|r| usize::from(r[0] + r[1] > 0.0)).collect();
        let data = Split { inputs: Tensor::new(vec![16, 4], x).unwrap(), labels };
        let cfg = TrainConfig { iters: 200, batch_size: 8, lr: 0.1, ..Default::default() };
        let mut a = ModelParams::build(&arch, 3).unwrap();
        let mut b = a.clone();
        let ta = fine_tune(&mut a, &data, &cfg, 9).unwrap();
        fine_tune(&mut b, &data, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(ta.last().unwrap().loss < ta[0].loss);
        assert!(accuracy(&a, &data).unwrap() >= 0.9);
    }
}
