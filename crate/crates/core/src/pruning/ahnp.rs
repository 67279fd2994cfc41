use super::{batch_seed, finish, lowest, shrink_with_state, subset, survivors, task_model, PruneResult, PruneTarget};
use crate::error::{Error, Result};
use crate::model::{GateScores, Mask, ModelParams};
use crate::taskgen::DatasetSplit;
use crate::tensor::{LrSchedule, Optimizer, Tensor};
use crate::train::{backprop, Gates, Sampler, TraceRow};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AhnpConfig {
    /// Gated optimization iterations `J`.
    pub iters: usize,
    /// Fine-tuning iterations `K` after the gates are folded away.
    pub finetune_iters: usize,
    /// Units whose gate magnitude drops below this are removed.
    pub gate_threshold: f64,
    /// Weight `λ` of the L1 penalty on gate scores.
    pub l1: f64,
    pub lr_inherited: f64,
    pub lr_gates: f64,
    /// Learning rate of the freshly initialized classifier.
    pub lr_classifier: f64,
    pub batch_size: usize,
    pub target: PruneTarget,
}

impl AhnpConfig {
    pub fn new(target: PruneTarget) -> Self {
        Self {
            iters: 500,
            finetune_iters: 100,
            gate_threshold: 0.05,
            l1: 1e-3,
            lr_inherited: 5e-4,
            lr_gates: 0.05,
            lr_classifier: 5e-3,
            batch_size: 128,
            target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_threshold >= 0.0 && self.gate_threshold.is_finite()) {
            return Err(Error::Config(format!("gate threshold must be a finite value >= 0, got {}", self.gate_threshold)));
        }
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(Error::Config(format!("L1 weight must be a finite value >= 0, got {}", self.l1)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("AHNP batch size must be >= 1".into()));
        }
        Ok(())
    }
}

struct Groups {
    body: Vec<usize>,
    head: Vec<usize>,
}

fn groups(model: &ModelParams) -> Groups {
    let specs = model.specs();
    let (head, body): (Vec<usize>, Vec<usize>) = (0..specs.len()).partition(|&i| specs[i].classifier);
    Groups { body, head }
}

/// Gate scores as plain vectors, for thresholding and folding.
fn gate_values(gates: &[Tensor]) -> Vec<Vec<f64>> {
    gates.iter().map(|g| g.data().to_vec()).collect()
}

/// Gated pruning: every unit output is multiplied by a trainable score
/// `S_{ℓ,i}` (initially 1) trained under cross-entropy plus `λ·Σ|S|`. After
/// each step units with `|S| < gate_threshold` are removed, lowest first,
/// without going below a layer's target; layers still above target after `J`
/// iterations are cut to target by lowest `|S|`. The surviving gates are
/// folded into the weights and the compact model is fine-tuned for `K`
/// iterations.
pub fn ahnp(pretrained: &ModelParams, data: &DatasetSplit, cfg: &AhnpConfig, seed: u64) -> Result<PruneResult> {
    cfg.validate()?;
    let widths = pretrained.arch().widths();
    let targets = cfg.target.keep_counts(&widths);
    let mut model = task_model(pretrained, data.num_classes(), seed);
    let g = groups(&model);
    let mut gates: Vec<Tensor> =
        widths.iter().map(|&n| Tensor::param(vec![n], vec![1.0; n])).collect::<Result<_>>()?;
    let gate_slots: Vec<usize> = (0..gates.len()).collect();
    let mut mask = Mask::full(&widths);
    let (mut opt_body, mut opt_head, mut opt_gate) = (Optimizer::adamw(0.0), Optimizer::adamw(0.0), Optimizer::adamw(0.0));
    let mut sampler = Sampler::new(data.train.len(), cfg.batch_size, batch_seed(seed))?;
    let mut trace = Vec::new();

    if cfg.iters > 0 {
        let sched = LrSchedule::new(1.0, 0.0, cfg.iters)?;
        for it in 0..cfg.iters {
            if mask.counts() == targets {
                break;
            }
            let batch = data.train.batch(&sampler.next_batch())?;
            let loss = backprop(&mut model, &batch, Some(Gates { scores: &mut gates, l1: cfg.l1 }))?;
            let f = sched.lr(it)?;
            opt_body.step(subset(model.tensors_mut(), &g.body), cfg.lr_inherited * f)?;
            opt_head.step(subset(model.tensors_mut(), &g.head), cfg.lr_classifier * f)?;
            opt_gate.step(gates.iter_mut(), cfg.lr_gates * f)?;

            let counts = mask.counts();
            let keep: Vec<Vec<usize>> = gate_values(&gates)
                .iter()
                .zip(counts.iter().zip(&targets))
                .map(|(s, (&k, &t))| {
                    let mags: Vec<f64> = s.iter().map(|v| v.abs()).collect();
                    let below = mags.iter().filter(|&&m| m < cfg.gate_threshold).count();
                    survivors(k, &lowest(&mags, below.min(k - t)))
                })
                .collect();
            if keep.iter().zip(&counts).any(|(kp, &k)| kp.len() < k) {
                prune(&mut model, &mut gates, &mut mask, keep, &mut opt_body, &mut opt_head, &mut opt_gate, &g, &gate_slots)?;
            }
            trace.push(TraceRow { iteration: it + 1, loss, lr: cfg.lr_inherited * f, kept: mask.counts() });
        }
    }

    // Fallback when thresholding alone has not reached the target.
    let counts = mask.counts();
    if counts != targets {
        let keep: Vec<Vec<usize>> = gate_values(&gates)
            .iter()
            .zip(counts.iter().zip(&targets))
            .map(|(s, (&k, &t))| {
                let mags: Vec<f64> = s.iter().map(|v| v.abs()).collect();
                survivors(k, &lowest(&mags, k - t))
            })
            .collect();
        prune(&mut model, &mut gates, &mut mask, keep, &mut opt_body, &mut opt_head, &mut opt_gate, &g, &gate_slots)?;
    }

    model.fold_gates(&GateScores::new(gate_values(&gates)))?;
    for t in model.tensors_mut() {
        t.zero_grad();
    }

    if cfg.finetune_iters > 0 {
        let sched = LrSchedule::new(1.0, 0.0, cfg.finetune_iters)?;
        let (mut opt_body, mut opt_head) = (Optimizer::adamw(0.0), Optimizer::adamw(0.0));
        let offset = trace.last().map_or(0, |r: &TraceRow| r.iteration);
        for it in 0..cfg.finetune_iters {
            let batch = data.train.batch(&sampler.next_batch())?;
            let loss = backprop(&mut model, &batch, None)?;
            let f = sched.lr(it)?;
            opt_body.step(subset(model.tensors_mut(), &g.body), cfg.lr_inherited * f)?;
            opt_head.step(subset(model.tensors_mut(), &g.head), cfg.lr_classifier * f)?;
            trace.push(TraceRow { iteration: offset + it + 1, loss, lr: cfg.lr_inherited * f, kept: mask.counts() });
        }
    }
    finish(mask, model, trace, data)
}

#[allow(clippy::too_many_arguments)]
fn prune(
    model: &mut ModelParams,
    gates: &mut [Tensor],
    mask: &mut Mask,
    keep: Vec<Vec<usize>>,
    opt_body: &mut Optimizer,
    opt_head: &mut Optimizer,
    opt_gate: &mut Optimizer,
    g: &Groups,
    gate_slots: &[usize],
) -> Result<()> {
    let compact = model.arch().widths();
    shrink_with_state(model, &keep, &mut [(opt_body, &g.body), (opt_head, &g.head)])?;
    for (l, kp) in keep.iter().enumerate() {
        let pick = |b: &[f64]| kp.iter().map(|&i| b[i]).collect::<Vec<f64>>();
        opt_gate.remap(gate_slots[l], pick);
        let v = pick(gates[l].data());
        gates[l] = Tensor::param(vec![v.len()], v)?;
    }
    *mask = mask.compose(&Mask::new(compact, keep)?)?;
    Ok(())
}
