use super::arch::ModelArch;
use super::mask::{GateScores, Mask};
use super::params::ModelParams;
use crate::error::{contract, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Handles into one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Traced {
    pub logits: Var,
    /// Per prunable layer, the unit outputs before unit scaling, with the
    /// unit index on axis 1.
    pub units: Vec<Var>,
    /// One leaf per parameter tensor, in spec order.
    pub params: Vec<Var>,
}

fn scaled(tape: &mut Tape, a: Var, s: Option<Var>) -> Result<Var> {
    match s {
        Some(s) => tape.mul_bcast(a, s, 1),
        None => Ok(a),
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_bcast(h, b, 1)
}

/// Records a forward pass of `params` on `input`.
///
/// `scales[ℓ]`, when present, is a `[n_ℓ]` vector multiplied into the outputs
/// of layer ℓ's units; masks pass 0/1 constants and gated training passes
/// trainable scores. With `trainable == false` parameters enter the tape as
/// constants, which is cheaper for evaluation.
pub fn trace(
    tape: &mut Tape,
    params: &ModelParams,
    input: Var,
    scales: &[Option<Var>],
    trainable: bool,
) -> Result<Traced> {
    let arch = params.arch();
    let widths = arch.widths();
    if scales.len() != widths.len() {
        return Err(contract(format!("{} unit scales for {} prunable layers", scales.len(), widths.len())));
    }
    for (l, (s, &n)) in scales.iter().zip(&widths).enumerate() {
        if let Some(s) = s {
            if tape.shape(*s) != [n] {
                return Err(shape_err("unit scale", format!("layer {l} expects [{n}], got {:?}", tape.shape(*s))));
            }
        }
    }
    let in_shape = tape.shape(input).to_vec();
    let b = in_shape[0];
    let per: usize = in_shape[1..].iter().product();
    if per != arch.input_numel() {
        return Err(shape_err("forward", format!("input {in_shape:?} for {arch}")));
    }
    let pv: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec()).expect("tensor shapes are consistent")
            }
        })
        .collect();
    let mut units = Vec::with_capacity(widths.len());

    let logits = match arch {
        ModelArch::Mlp { input_dim, hidden, .. } => {
            let mut x = tape.reshape(input, vec![b, *input_dim])?;
            for i in 0..hidden.len() {
                let h = dense(tape, x, pv[2 * i], pv[2 * i + 1])?;
                let a = tape.relu(h);
                units.push(a);
                x = scaled(tape, a, scales[i])?;
            }
            let k = 2 * hidden.len();
            dense(tape, x, pv[k], pv[k + 1])?
        }
        ModelArch::ConvNet { in_channels, side, filters, .. } => {
            let mut x = tape.reshape(input, vec![b, *in_channels, *side, *side])?;
            for i in 0..filters.len() {
                let h = tape.conv2d(x, pv[2 * i])?;
                let h = tape.add_bcast(h, pv[2 * i + 1], 1)?;
                let a = tape.relu(h);
                units.push(a);
                x = scaled(tape, a, scales[i])?;
            }
            let c = *filters.last().expect("validated non-empty");
            let flat = tape.reshape(x, vec![b, c, side * side])?;
            let pooled = tape.mean_axis(flat, 2)?;
            let k = 2 * filters.len();
            dense(tape, pooled, pv[k], pv[k + 1])?
        }
        ModelArch::Transformer { side, patch, d_model, head_dim, heads, .. } => {
            let (p, g, d, dh) = (*patch, side / patch, *d_model, *head_dim);
            let t = g * g;
            // [B, g, p, g, p] -> [B, g, g, p, p]: row-major patches.
            let x0 = tape.reshape(input, vec![b * g, p, g, p])?;
            let x1 = tape.swap_axes12(x0)?;
            let tok = tape.reshape(x1, vec![b * t, p * p])?;
            let e = dense(tape, tok, pv[0], pv[1])?;
            let e = tape.reshape(e, vec![b, t, d])?;
            let e = tape.add_bcast(e, pv[2], 1)?;
            let mut x = tape.reshape(e, vec![b * t, d])?;
            let inv_sqrt = 1.0 / (dh as f64).sqrt();
            for blk in 0..heads.len() {
                let base = 3 + 12 * blk;
                let h = heads[blk];
                let w = h * dh;
                let split = |tape: &mut Tape, wi: usize| -> Result<Var> {
                    let y = dense(tape, x, pv[base + 2 * wi], pv[base + 2 * wi + 1])?;
                    let y = tape.reshape(y, vec![b, t, h, dh])?;
                    let y = tape.swap_axes12(y)?;
                    tape.reshape(y, vec![b * h, t, dh])
                };
                let q = split(tape, 0)?;
                let k = split(tape, 1)?;
                let v = split(tape, 2)?;
                let kt = tape.transpose_last2(k)?;
                let sc = tape.bmm(q, kt)?;
                let sc = tape.scale(sc, inv_sqrt);
                let att = tape.softmax(sc);
                let o = tape.bmm(att, v)?;
                let o = tape.reshape(o, vec![b, h, t, dh])?;
                units.push(o);
                let o = scaled(tape, o, scales[2 * blk])?;
                let o = tape.swap_axes12(o)?;
                let o = tape.reshape(o, vec![b * t, w])?;
                let proj = dense(tape, o, pv[base + 6], pv[base + 7])?;
                x = tape.add(x, proj)?;
                let u = dense(tape, x, pv[base + 8], pv[base + 9])?;
                let u = tape.relu(u);
                units.push(u);
                let u = scaled(tape, u, scales[2 * blk + 1])?;
                let down = dense(tape, u, pv[base + 10], pv[base + 11])?;
                x = tape.add(x, down)?;
            }
            let xs = tape.reshape(x, vec![b, t, d])?;
            let pooled = tape.mean_axis(xs, 1)?;
            let k = pv.len() - 2;
            dense(tape, pooled, pv[k], pv[k + 1])?
        }
    };
    Ok(Traced { logits, units, params: pv })
}

/// Per-layer multipliers: 0 outside the mask, the gate score (or 1) inside.
pub fn unit_scales(mask: &Mask, gates: Option<&GateScores>) -> Result<Vec<Vec<f64>>> {
    if let Some(g) = gates {
        g.check_covers(mask)?;
    }
    Ok(mask
        .layers()
        .iter()
        .zip(mask.widths())
        .enumerate()
        .map(|(l, (kept, &n))| {
            let mut s = vec![0.0; n];
            for (j, &u) in kept.iter().enumerate() {
                s[u] = gates.map_or(1.0, |g| g.layer(l)[j]);
            }
            s
        })
        .collect())
}

impl ModelParams {
    /// Plain forward pass; returns logits `[B, classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.shape().to_vec(), batch.data().to_vec())?;
        let scales = vec![None; self.arch().num_prunable()];
        let out = trace(&mut tape, self, x, &scales, false)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Forward pass in which units outside `mask` contribute exactly zero and
    /// kept units are multiplied by their gate score when `gates` is given.
    pub fn masked_forward(&self, mask: &Mask, gates: Option<&GateScores>, batch: &Tensor) -> Result<Tensor> {
        self.check_mask(mask)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.shape().to_vec(), batch.data().to_vec())?;
        let scales = unit_scales(mask, gates)?
            .into_iter()
            .map(|s| tape.constant(vec![s.len()], s).map(Some))
            .collect::<Result<Vec<_>>>()?;
        let out = trace(&mut tape, self, x, &scales, false)?;
        Ok(tape.to_tensor(out.logits))
    }
}
