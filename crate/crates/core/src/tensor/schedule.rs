use crate::error::{contract, Result};

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(contract("cosine schedule needs total_steps >= 1"));
        }
        if min_lr > base_lr {
            return Err(contract(format!("min_lr {min_lr} exceeds base_lr {base_lr}")));
        }
        Ok(Self { base_lr, min_lr, total_steps })
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}
