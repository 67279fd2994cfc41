use super::Tensor;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 0.0 }
    }
}

/// Bias-corrected Adam moments with decoupled, lr-scaled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum(SgdConfig),
    AdamWLike(AdamWConfig),
}

#[derive(Clone, Debug)]
enum Slot {
    Empty,
    Momentum(Vec<f64>),
    Moments { m: Vec<f64>, v: Vec<f64> },
}

/// First-order optimizer with per-parameter auxiliary buffers.
///
/// Buffers are keyed by parameter position, so callers must pass the same
/// parameter list, in the same order, on every step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: Vec<Slot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, slots: Vec::new(), steps: 0 }
    }

    pub fn sgd(momentum: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum(SgdConfig { momentum, weight_decay: 0.0 }))
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamWLike(AdamWConfig { weight_decay, ..Default::default() }))
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable tensor and clears its gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), Slot::Empty);
        }
        if let Some(i) = params.iter().position(|p| p.requires_grad() && p.grad().is_none()) {
            return Err(contract(format!("parameter {i} has no gradient at optimizer step")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (p, slot) in params.into_iter().zip(self.slots.iter_mut()) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let n = g.len();
            match self.kind {
                OptimizerKind::SgdMomentum(cfg) => {
                    if !matches!(slot, Slot::Momentum(b) if b.len() == n) {
                        *slot = Slot::Momentum(vec![0.0; n]);
                    }
                    let Slot::Momentum(buf) = slot else { unreachable!() };
                    for ((w, gi), v) in p.data.iter_mut().zip(&g).zip(buf.iter_mut()) {
                        let gi = gi + cfg.weight_decay * *w;
                        *v = cfg.momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::AdamWLike(cfg) => {
                    if !matches!(slot, Slot::Moments { m, .. } if m.len() == n) {
                        *slot = Slot::Moments { m: vec![0.0; n], v: vec![0.0; n] };
                    }
                    let Slot::Moments { m, v } = slot else { unreachable!() };
                    let bc1 = 1.0 - cfg.beta1.powi(t);
                    let bc2 = 1.0 - cfg.beta2.powi(t);
                    for (((w, gi), mi), vi) in
                        p.data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *w -= lr * cfg.weight_decay * *w;
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Rewrites every auxiliary buffer of parameter `index` through `f`,
    /// e.g. to follow a parameter that was physically shrunk.
    pub fn remap(&mut self, index: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) {
        match self.slots.get_mut(index) {
            Some(Slot::Momentum(b)) => *b = f(b),
            Some(Slot::Moments { m, v }) => {
                *m = f(m);
                *v = f(v);
            }
            _ => {}
        }
    }

    /// Auxiliary buffers of parameter `index` (empty before its first step).
    pub fn buffers(&self, index: usize) -> Vec<&[f64]> {
        match self.slots.get(index) {
            Some(Slot::Momentum(b)) => vec![b.as_slice()],
            Some(Slot::Moments { m, v }) => vec![m.as_slice(), v.as_slice()],
            _ => Vec::new(),
        }
    }
}
