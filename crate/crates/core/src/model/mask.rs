use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

/// Kept unit indices `Ω_ℓ` for every prunable layer, each sorted and non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    widths: Vec<usize>,
    kept: Vec<Vec<usize>>,
}

impl Mask {
    /// Sorts each layer's indices and checks uniqueness, range and non-emptiness.
    pub fn new(widths: Vec<usize>, mut kept: Vec<Vec<usize>>) -> Result<Self> {
        if widths.len() != kept.len() {
            return Err(contract(format!(
                "mask has {} layers but {} widths",
                kept.len(),
                widths.len()
            )));
        }
        for (l, (k, &n)) in kept.iter_mut().zip(&widths).enumerate() {
            k.sort_unstable();
            if k.is_empty() {
                return Err(contract(format!("mask layer {l} keeps no unit")));
            }
            if k.windows(2).any(|w| w[0] == w[1]) {
                return Err(contract(format!("mask layer {l} repeats a unit")));
            }
            if let Some(&bad) = k.iter().find(|&&u| u >= n) {
                return Err(contract(format!("mask layer {l} keeps unit {bad} of {n}")));
            }
        }
        Ok(Self { widths, kept })
    }

    pub fn full(widths: &[usize]) -> Self {
        Self { widths: widths.to_vec(), kept: widths.iter().map(|&n| (0..n).collect()).collect() }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.kept.len()
    }

    pub fn kept(&self, layer: usize) -> &[usize] {
        &self.kept[layer]
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.kept
    }

    pub fn counts(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }

    pub fn contains(&self, layer: usize, unit: usize) -> bool {
        self.kept[layer].binary_search(&unit).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.kept.iter().zip(&self.widths).all(|(k, &n)| k.len() == n)
    }

    /// Maps a mask expressed over this mask's compact indices back to the
    /// original index space.
    pub fn compose(&self, inner: &Mask) -> Result<Mask> {
        if inner.widths != self.counts() {
            return Err(contract(format!(
                "inner mask widths {:?} do not match kept counts {:?}",
                inner.widths,
                self.counts()
            )));
        }
        let kept = self
            .kept
            .iter()
            .zip(&inner.kept)
            .map(|(outer, inner)| inner.iter().map(|&j| outer[j]).collect())
            .collect();
        Mask::new(self.widths.clone(), kept)
    }
}

/// One line per layer: `layer=<ℓ> width=<n_ℓ> kept=<i,j,...>`.
impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, (k, n)) in self.kept.iter().zip(&self.widths).enumerate() {
            let idx: Vec<String> = k.iter().map(usize::to_string).collect();
            writeln!(f, "layer={l} width={n} kept={}", idx.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut widths = Vec::new();
        let mut kept = Vec::new();
        for (i, line) in s.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let mut layer = None;
            let mut width = None;
            let mut units = None;
            for field in line.split_whitespace() {
                match field.split_once('=') {
                    Some(("layer", v)) => layer = v.parse::<usize>().ok(),
                    Some(("width", v)) => width = v.parse::<usize>().ok(),
                    Some(("kept", v)) => {
                        units = v.split(',').map(str::parse::<usize>).collect::<std::result::Result<Vec<_>, _>>().ok()
                    }
                    _ => return Err(Error::Parse(format!("bad mask field {field:?}"))),
                }
            }
            match (layer, width, units) {
                (Some(l), Some(w), Some(u)) if l == i => {
                    widths.push(w);
                    kept.push(u);
                }
                _ => return Err(Error::Parse(format!("bad mask line {line:?}"))),
            }
        }
        Mask::new(widths, kept)
    }
}

/// Trainable multipliers `S_{ℓ,i}`, one per kept unit, in mask order.
#[derive(Clone, Debug, PartialEq)]
pub struct GateScores {
    layers: Vec<Vec<f64>>,
}

impl GateScores {
    pub fn ones(mask: &Mask) -> Self {
        Self { layers: mask.layers().iter().map(|k| vec![1.0; k.len()]).collect() }
    }

    pub fn new(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Vec<f64> {
        &mut self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn check_covers(&self, mask: &Mask) -> Result<()> {
        if self.layers.len() != mask.num_layers()
            || self.layers.iter().zip(mask.layers()).any(|(g, k)| g.len() != k.len())
        {
            return Err(contract("gate scores must cover exactly the kept units of the mask"));
        }
        Ok(())
    }
}
