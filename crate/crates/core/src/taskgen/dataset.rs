use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use super::taxonomy::Taxonomy;
use crate::error::{contract, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// A classification task over `classes` (taxonomy leaf ids); label `y` is the
/// position of the class in `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub id: u64,
    pub classes: Vec<usize>,
    pub data_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub side: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Per-sample standard deviation added to prototype coordinates before
    /// rendering.
    pub jitter: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { side: 16, noise: 0.3, jitter: 0.0, train_per_class: 100, val_per_class: 30, test_per_class: 50 }
    }
}

/// Inputs `[n, 1, side, side]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split { inputs: self.inputs.select_rows(idx)?, labels: idx.iter().map(|&i| self.labels[i]).collect() })
    }

    /// At most `n` samples drawn without replacement with the given seed.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Split> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx = index::sample(&mut seed::rng(seed), self.len(), n).into_vec();
        idx.sort_unstable();
        self.batch(&idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl DatasetSplit {
    /// Number of task classes, taken from the training labels.
    pub fn num_classes(&self) -> usize {
        self.train.labels.iter().max().map_or(0, |&y| y + 1)
    }
}

/// Fixed pattern basis: even indices are oriented sinusoidal gratings, odd
/// indices Gaussian blobs. Every pattern has unit RMS.
pub fn basis(dim: usize, side: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(0x6261_7369_73);
    let s = side as f64;
    (0..dim)
        .map(|j| {
            let mut img = vec![0.0; side * side];
            if j % 2 == 0 {
                let fx = rng.gen_range(0..4) as f64;
                let fy = rng.gen_range(if fx == 0.0 { 1 } else { 0 }..4) as f64;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for (k, v) in img.iter_mut().enumerate() {
                    let (y, x) = ((k / side) as f64, (k % side) as f64);
                    *v = (std::f64::consts::TAU * (fx * x + fy * y) / s + phase).cos();
                }
            } else {
                let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                // Tiny images have no room for the usual width range.
                let w = if s > 6.0 { rng.gen_range(1.5..s / 4.0) } else { 1.5 };
                for (k, v) in img.iter_mut().enumerate() {
                    let (y, x) = ((k / side) as f64, (k % side) as f64);
                    *v = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp();
                }
            }
            let rms = (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt();
            img.iter_mut().for_each(|v| *v /= rms);
            img
        })
        .collect()
}

/// Noise-free image of a prototype: `Σ_j c_j·B_j / sqrt(dim)`.
pub fn render(coeffs: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut img = vec![0.0; basis[0].len()];
    let norm = 1.0 / (coeffs.len() as f64).sqrt();
    for (c, b) in coeffs.iter().zip(basis) {
        for (v, bv) in img.iter_mut().zip(b) {
            *v += c * norm * bv;
        }
    }
    img
}

fn class_split(
    taxonomy: &Taxonomy,
    basis: &[Vec<f64>],
    class: usize,
    data_seed: u64,
    split: u64,
    n: usize,
    cfg: &DataConfig,
    out: &mut Vec<f64>,
) -> Result<()> {
    let proto = taxonomy.prototype(class)?;
    let base = render(proto, basis);
    let mut rng = seed::rng(seed::derive(seed::derive(data_seed, class as u64), split));
    for _ in 0..n {
        if cfg.jitter > 0.0 {
            let c: Vec<f64> = proto.iter().map(|&p| p + cfg.jitter * rng.sample::<f64, _>(StandardNormal)).collect();
            out.extend(render(&c, basis).into_iter().map(|v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal)));
        } else {
            out.extend(base.iter().map(|&v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    Ok(())
}

/// Samples of every class of `task`, class-major. Samples of a class depend
/// only on `(data_seed, class, split)`, so tasks sharing a class and data seed
/// see identical images of it.
pub fn materialize_dataset(task: &TaskSpec, taxonomy: &Taxonomy, cfg: &DataConfig) -> Result<DatasetSplit> {
    if let Some(&bad) = task.classes.iter().find(|&&c| c >= taxonomy.num_classes()) {
        return Err(contract(format!("task {} uses class {bad}, not a leaf of the taxonomy", task.id)));
    }
    let basis = basis(taxonomy.proto_dim(), cfg.side);
    let make = |split: u64, per: usize| -> Result<Split> {
        let mut data = Vec::with_capacity(task.classes.len() * per * cfg.side * cfg.side);
        let mut labels = Vec::with_capacity(task.classes.len() * per);
        for (y, &c) in task.classes.iter().enumerate() {
            class_split(taxonomy, &basis, c, task.data_seed, split, per, cfg, &mut data)?;
            labels.extend(std::iter::repeat_n(y, per));
        }
        Ok(Split { inputs: Tensor::new(vec![labels.len(), 1, cfg.side, cfg.side], data)?, labels })
    };
    Ok(DatasetSplit { train: make(0, cfg.train_per_class)?, val: make(1, cfg.val_per_class)?, test: make(2, cfg.test_per_class)? })
}

/// `num_tasks` tasks with ids `0..num_tasks`, each on `m` distinct classes
/// drawn uniformly (listed in ascending order). All tasks share one data seed
/// so a class looks the same in every task.
pub fn sample_task_universe(taxonomy: &Taxonomy, num_tasks: usize, m: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let leaves = taxonomy.num_classes();
    if m < 2 || m > leaves {
        return Err(Error::Config(format!("cannot draw {m} classes per task from {leaves} leaves")));
    }
    let data_seed = seed::derive_tag(seed, "data");
    Ok((0..num_tasks as u64)
        .map(|id| {
            let mut rng = seed::rng(seed::derive(seed::derive_tag(seed, "tasks"), id));
            let mut classes = index::sample(&mut rng, leaves, m).into_vec();
            classes.sort_unstable();
            TaskSpec { id, classes, data_seed }
        })
        .collect())
}

/// `task <id> seed=<data_seed> classes=<c,...>`
impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c: Vec<String> = self.classes.iter().map(usize::to_string).collect();
        write!(f, "task {} seed={} classes={}", self.id, self.data_seed, c.join(","))
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad task line {s:?}"));
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 4 || f[0] != "task" {
            return Err(bad());
        }
        let id = f[1].parse().map_err(|_| bad())?;
        let data_seed = f[2].strip_prefix("seed=").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let classes = f[3]
            .strip_prefix("classes=")
            .ok_or_else(bad)?
            .split(',')
            .map(|c| c.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?;
        Ok(TaskSpec { id, classes, data_seed })
    }
}

pub fn write_tasks(tasks: &[TaskSpec]) -> String {
    tasks.iter().map(|t| format!("{t}\n")).collect()
}

pub fn parse_tasks(s: &str) -> Result<Vec<TaskSpec>> {
    s.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).map(str::parse).collect()
}
