//! Per-unit importance scores used to decide which units to prune.

use std::fmt;
use std::str::FromStr;

use super::forward::{trace, unit_scales};
use super::mask::Mask;
use super::params::ModelParams;
use crate::error::{contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Mean post-activation value (mean magnitude for attention heads).
    Activation,
    /// First-order estimate of the loss change when the unit is removed.
    Taylor,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Activation => "activation",
            Criterion::Taylor => "taylor",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Criterion::Activation),
            "taylor" => Ok(Criterion::Taylor),
            other => Err(Error::Parse(format!("unknown criterion {other:?}"))),
        }
    }
}

/// `(outer, n, inner)` split of a unit tensor whose unit axis is axis 1.
fn unit_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn record(tape: &mut Tape, params: &ModelParams, mask: &Mask, inputs: &Tensor, trainable: bool) -> Result<(Var, Vec<Var>)> {
    params.check_mask(mask)?;
    if inputs.shape()[0] == 0 {
        return Err(contract("importance needs a non-empty dataset"));
    }
    let x = tape.constant(inputs.shape().to_vec(), inputs.data().to_vec())?;
    let scales = unit_scales(mask, None)?
        .into_iter()
        .map(|s| tape.constant(vec![s.len()], s).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let out = trace(tape, params, x, &scales, trainable)?;
    Ok((out.logits, out.units))
}

/// Mean over samples and positions of each kept unit's output magnitude.
/// Scores are returned per layer, aligned with `mask.kept(ℓ)`.
pub fn unit_activation_importance(params: &ModelParams, mask: &Mask, inputs: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (_, units) = record(&mut tape, params, mask, inputs, false)?;
    Ok(units
        .iter()
        .enumerate()
        .map(|(l, &u)| {
            let (outer, n, inner) = unit_dims(tape.shape(u));
            let v = tape.value(u);
            let mut sums = vec![0.0; n];
            for o in 0..outer {
                for (i, s) in sums.iter_mut().enumerate() {
                    let base = (o * n + i) * inner;
                    *s += v[base..base + inner].iter().map(|x| x.abs()).sum::<f64>();
                }
            }
            let denom = (outer * inner) as f64;
            mask.kept(l).iter().map(|&i| sums[i] / denom).collect()
        })
        .collect())
}

/// `|mean over samples of Σ_positions ∂loss/∂a · a|` for each kept unit,
/// where the loss is the per-sample cross-entropy.
pub fn unit_taylor_importance(
    params: &ModelParams,
    mask: &Mask,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (logits, units) = record(&mut tape, params, mask, inputs, true)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let acts: Vec<(Vec<usize>, Vec<f64>)> = units.iter().map(|&u| (tape.shape(u).to_vec(), tape.value(u).to_vec())).collect();
    let grads = tape.backward_retaining(loss, &units)?;
    Ok(units
        .iter()
        .zip(acts)
        .enumerate()
        .map(|(l, (&u, (shape, a)))| {
            let (outer, n, inner) = unit_dims(&shape);
            let zero = vec![0.0; a.len()];
            let g = grads.get(u).unwrap_or(&zero);
            let mut sums = vec![0.0; n];
            for o in 0..outer {
                for (i, s) in sums.iter_mut().enumerate() {
                    let base = (o * n + i) * inner;
                    *s += g[base..base + inner].iter().zip(&a[base..base + inner]).map(|(g, a)| g * a).sum::<f64>();
                }
            }
            // The tape's loss is the batch mean, so Σ g·a over the batch is
            // already the mean over samples of the per-sample sums.
            mask.kept(l).iter().map(|&i| sums[i].abs()).collect()
        })
        .collect())
}

pub fn unit_importance(
    criterion: Criterion,
    params: &ModelParams,
    mask: &Mask,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    match criterion {
        Criterion::Activation => unit_activation_importance(params, mask, inputs),
        Criterion::Taylor => unit_taylor_importance(params, mask, inputs, labels),
    }
}
