use std::io::{Read, Write};

use rand::Rng;

use super::arch::{Init, ModelArch, ParamSpec, Role};
use super::mask::{GateScores, Mask};
use crate::error::{contract, shape_err, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Parameters `θ` of a model, one tensor per [`ParamSpec`] of its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ModelArch,
    tensors: Vec<Tensor>,
}

/// Element indices along every axis of `spec` for the given per-layer unit lists.
pub(crate) fn axis_indices(spec: &ParamSpec, units: &[Vec<usize>]) -> Vec<Vec<usize>> {
    spec.shape
        .iter()
        .zip(&spec.axes)
        .map(|(&len, owner)| match owner {
            None => (0..len).collect(),
            Some(o) => units[o.layer].iter().flat_map(|&u| u * o.block..(u + 1) * o.block).collect(),
        })
        .collect()
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sub-tensor of `data` (with `shape`) at the cartesian product of `idx`.
pub(crate) fn gather(data: &[f64], shape: &[usize], idx: &[Vec<usize>]) -> Vec<f64> {
    fn rec(data: &[f64], st: &[usize], idx: &[Vec<usize>], axis: usize, off: usize, out: &mut Vec<f64>) {
        if axis + 1 == idx.len() {
            out.extend(idx[axis].iter().map(|&i| data[off + i * st[axis]]));
        } else {
            for &i in &idx[axis] {
                rec(data, st, idx, axis + 1, off + i * st[axis], out);
            }
        }
    }
    let st = strides(shape);
    let mut out = Vec::with_capacity(idx.iter().map(Vec::len).product());
    rec(data, &st, idx, 0, 0, &mut out);
    out
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let n = spec.numel();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Uniform(b) => {
            let mut rng = seed::rng(seed);
            (0..n).map(|_| rng.gen_range(-b..b)).collect()
        }
    };
    Tensor::param(spec.shape.clone(), data).expect("spec shapes are non-empty")
}

impl ModelParams {
    /// Fan-in-scaled uniform initialization, one independent stream per tensor.
    pub fn build(arch: &ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self::init_unchecked(arch, seed))
    }

    fn init_unchecked(arch: &ModelArch, seed: u64) -> Self {
        let tensors = arch
            .param_specs()
            .iter()
            .enumerate()
            .map(|(i, s)| init_tensor(s, seed::derive(seed, i as u64)))
            .collect();
        Self { arch: arch.clone(), tensors }
    }

    pub fn from_tensors(arch: ModelArch, tensors: Vec<Tensor>) -> Result<Self> {
        let specs = arch.param_specs();
        if specs.len() != tensors.len() {
            return Err(contract(format!("{} tensors for {} parameter specs", tensors.len(), specs.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(shape_err("from_tensors", format!("{} expects {:?}, got {:?}", s.name, s.shape, t.shape())));
            }
        }
        let tensors = tensors.into_iter().map(|t| t.with_requires_grad(true)).collect();
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.arch.param_specs()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.specs().iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the classifier with a fresh one for `num_classes` outputs.
    pub fn reinit_classifier(&mut self, num_classes: usize, seed: u64) {
        let arch = self.arch.with_num_classes(num_classes);
        let specs = arch.param_specs();
        for (i, s) in specs.iter().enumerate().filter(|(_, s)| s.classifier) {
            self.tensors[i] = init_tensor(s, seed::derive(seed, i as u64));
        }
        self.arch = arch;
    }

    /// Keeps, for each prunable layer, the units listed (in that order).
    /// Lists may be arbitrary permutations or subsets of `0..n_ℓ`.
    pub fn select_units(&self, units: &[Vec<usize>]) -> Result<Self> {
        let widths = self.arch.widths();
        if units.len() != widths.len() {
            return Err(contract(format!("{} unit lists for {} prunable layers", units.len(), widths.len())));
        }
        for (l, (u, &n)) in units.iter().zip(&widths).enumerate() {
            if u.is_empty() || u.iter().any(|&i| i >= n) {
                return Err(contract(format!("unit list for layer {l} is empty or out of range")));
            }
        }
        let new_widths: Vec<usize> = units.iter().map(Vec::len).collect();
        let arch = self.arch.with_widths(&new_widths)?;
        let tensors = self
            .specs()
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| {
                let idx = axis_indices(s, units);
                let shape = idx.iter().map(Vec::len).collect();
                Tensor::param(shape, gather(t.data(), &s.shape, &idx))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, tensors })
    }

    /// Physically removes every unit outside `mask`, along with the slices of
    /// downstream layers that read it.
    pub fn shrink_to_mask(&self, mask: &Mask) -> Result<Self> {
        self.check_mask(mask)?;
        self.select_units(mask.layers())
    }

    pub fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.widths() != self.arch.widths() {
            return Err(contract(format!(
                "mask over widths {:?} does not fit architecture widths {:?}",
                mask.widths(),
                self.arch.widths()
            )));
        }
        Ok(())
    }

    /// Multiplies each unit's outgoing (consumer) slices by its gate score,
    /// so the model without gates computes what the gated model did.
    pub fn fold_gates(&mut self, gates: &GateScores) -> Result<()> {
        let widths = self.arch.widths();
        if gates.layers().len() != widths.len() || gates.layers().iter().zip(&widths).any(|(g, &n)| g.len() != n) {
            return Err(contract("fold_gates needs one score per unit of the compact model"));
        }
        for (s, t) in self.specs().iter().zip(self.tensors.iter_mut()) {
            for (axis, owner) in s.axes.iter().enumerate() {
                let Some(o) = owner.filter(|o| o.role == Role::Consumer) else { continue };
                let st = strides(&s.shape);
                let scores = gates.layer(o.layer);
                let data = t.data_mut();
                for (flat, v) in data.iter_mut().enumerate() {
                    let i = (flat / st[axis]) % s.shape[axis];
                    *v *= scores[i / o.block];
                }
            }
        }
        Ok(())
    }

    /// Compact binary form: 64-bit little-endian values behind a descriptor header.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let desc = self.arch.to_string();
        w.write_all(b"MPRM")?;
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        w.write_all(desc.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MPRM" {
            return Err(Error::Parse("not a model parameter file".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let mut desc = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut desc)?;
        let arch: ModelArch = String::from_utf8(desc)
            .map_err(|_| Error::Parse("architecture descriptor is not UTF-8".into()))?
            .parse()?;
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let specs = arch.param_specs();
        if count != specs.len() {
            return Err(Error::Parse(format!("{count} tensors stored for {} specs", specs.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for s in &specs {
            let mut u64b = [0u8; 8];
            r.read_exact(&mut u64b)?;
            let n = u64::from_le_bytes(u64b) as usize;
            if n != s.numel() {
                return Err(Error::Parse(format!("{} stores {n} values, expected {}", s.name, s.numel())));
            }
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor::param(s.shape.clone(), data)?);
        }
        Ok(Self { arch, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let a = ModelArch::mlp_default(5);
        assert_eq!(ModelParams::build(&a, 3).unwrap(), ModelParams::build(&a, 3).unwrap());
        assert_ne!(ModelParams::build(&a, 3).unwrap(), ModelParams::build(&a, 4).unwrap());
    }

    #[test]
    fn shrink_keeps_two_filters() {
        let a = ModelArch::ConvNet { in_channels: 1, side: 8, kernel: 3, filters: vec![20, 6], num_classes: 3 };
        let p = ModelParams::build(&a, 1).unwrap();
        let mask = Mask::new(vec![20, 6], vec![vec![3, 11], (0..6).collect()]).unwrap();
        let c = p.shrink_to_mask(&mask).unwrap();
        assert_eq!(c.tensor("conv0.weight").unwrap().shape(), &[2, 1, 3, 3]);
        assert_eq!(c.tensor("conv1.weight").unwrap().shape(), &[6, 2, 3, 3]);
        // kept filter 11 is now filter 1
        assert_eq!(
            &c.tensor("conv0.weight").unwrap().data()[9..18],
            &p.tensor("conv0.weight").unwrap().data()[99..108]
        );
    }

    #[test]
    fn full_mask_is_identity() {
        let a = ModelArch::transformer_default(4);
        let p = ModelParams::build(&a, 9).unwrap();
        let c = p.shrink_to_mask(&Mask::full(&a.widths())).unwrap();
        assert_eq!(p, c);
    }

    #[test]
    fn reinit_classifier_changes_only_head() {
        let a = ModelArch::mlp_default(64);
        let mut p = ModelParams::build(&a, 1).unwrap();
        let before = p.clone();
        p.reinit_classifier(5, 2);
        assert_eq!(p.arch().num_classes(), 5);
        assert_eq!(p.tensor("fc1.weight"), before.tensor("fc1.weight"));
        assert_eq!(p.tensor("head.weight").unwrap().shape(), &[64, 5]);
    }

    #[test]
    fn binary_round_trip() {
        let p = ModelParams::build(&ModelArch::convnet_default(5), 4).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ModelParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }
}
