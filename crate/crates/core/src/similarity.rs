//! Task similarity (LEEP, Wu-Palmer), neighbour retrieval, equal-interval
//! similarity groups and mask-overlap analytics.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::model::{Mask, ModelParams};
use crate::taskgen::{Split, Taxonomy};
use crate::train::predict_proba;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Leep,
    Wup,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Leep => "leep",
            Metric::Wup => "wup",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leep" => Ok(Metric::Leep),
            "wup" => Ok(Metric::Wup),
            other => Err(Error::Parse(format!("unknown similarity metric {other:?}"))),
        }
    }
}

/// `|A ∩ B| / |A ∪ B|` of the kept sets of one layer.
pub fn iou(a: &Mask, b: &Mask, layer: usize) -> Result<f64> {
    if layer >= a.num_layers() || layer >= b.num_layers() || a.widths()[layer] != b.widths()[layer] {
        return Err(contract(format!("masks are not comparable at layer {layer}")));
    }
    let (x, y) = (a.kept(layer), b.kept(layer));
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (x.len() + y.len() - inter) as f64)
}

/// LEEP from source-label distributions `theta` (`n × z`, rows summing to 1)
/// and target labels in `0..num_labels`.
pub fn leep_from_predictions(theta: &[f64], z: usize, labels: &[usize], num_labels: usize) -> Result<f64> {
    let n = labels.len();
    if n == 0 || z == 0 || theta.len() != n * z {
        return Err(contract(format!("LEEP needs an n×z prediction matrix, got {} values for n={n}, z={z}", theta.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_labels) {
        return Err(contract(format!("label {y} outside 0..{num_labels}")));
    }
    let mut joint = vec![0.0; num_labels * z];
    for (row, &y) in theta.chunks(z).zip(labels) {
        for (k, &p) in row.iter().enumerate() {
            joint[y * z + k] += p / n as f64;
        }
    }
    let mut marginal = vec![0.0; z];
    for y in 0..num_labels {
        for k in 0..z {
            marginal[k] += joint[y * z + k];
        }
    }
    let mut total = 0.0;
    for (row, &y) in theta.chunks(z).zip(labels) {
        let eep: f64 = (0..z).filter(|&k| marginal[k] > 0.0).map(|k| joint[y * z + k] / marginal[k] * row[k]).sum();
        total += eep.ln();
    }
    Ok(total / n as f64)
}

/// Transferability of `source` (a model over its own classes) to the target
/// samples in `target`; higher is more transferable and the value is ≤ 0.
pub fn leep_score(source: &ModelParams, target: &Split) -> Result<f64> {
    if target.is_empty() {
        return Err(contract("LEEP needs target samples"));
    }
    let theta = predict_proba(source, &target.inputs)?;
    let z = theta.shape()[1];
    let labels = target.labels.iter().max().map_or(0, |&y| y + 1);
    leep_from_predictions(theta.data(), z, &target.labels, labels)
}

/// `2·depth(lcs) / (depth(a) + depth(b))` with root depth 1.
pub fn wup_similarity(taxonomy: &Taxonomy, a: usize, b: usize) -> Result<f64> {
    let (na, nb) = (taxonomy.leaf_node(a)?, taxonomy.leaf_node(b)?);
    let lcs = taxonomy.lcs(na, nb);
    Ok(2.0 * taxonomy.depth(lcs) as f64 / (taxonomy.depth(na) + taxonomy.depth(nb)) as f64)
}

/// Mean Wu-Palmer similarity over all `|C_i| × |C_j|` class pairs.
pub fn task_wup(taxonomy: &Taxonomy, a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("task similarity of an empty class set"));
    }
    let mut s = 0.0;
    for &x in a {
        for &y in b {
            s += wup_similarity(taxonomy, x, y)?;
        }
    }
    Ok(s / (a.len() * b.len()) as f64)
}

/// Top-`n` candidate ids by descending score, lower id first on ties,
/// never including `exclude`.
pub fn nearest(scores: &[(u64, f64)], exclude: u64, n: usize) -> Result<Vec<u64>> {
    let mut c: Vec<(u64, f64)> = scores.iter().copied().filter(|&(id, _)| id != exclude).collect();
    if c.len() < n {
        return Err(contract(format!("{n} neighbours requested but only {} candidates", c.len())));
    }
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(c.into_iter().take(n).map(|(id, _)| id).collect())
}

pub const NUM_GROUPS: usize = 5;

/// Five equal-width score intervals; `members[0]` is the most similar.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGroups {
    /// `bounds[g]` is the lower edge of group `g + 1`'s interval; the last
    /// group extends down to the minimum score.
    pub bounds: [f64; NUM_GROUPS],
    pub min: f64,
    pub max: f64,
    pub members: [Vec<u64>; NUM_GROUPS],
    /// All scores were equal; every id was placed in group 1.
    pub degenerate: bool,
}

impl SimilarityGroups {
    pub fn group_of(&self, score: f64) -> usize {
        if self.degenerate {
            return 0;
        }
        self.bounds.iter().position(|&b| score >= b).unwrap_or(NUM_GROUPS - 1)
    }
}

/// Splits `[min, max]` into five equal intervals, assigning boundary values
/// to the more similar group.
pub fn partition_similarity_groups(scores: &[(u64, f64)]) -> Result<SimilarityGroups> {
    if scores.is_empty() {
        return Err(contract("cannot group an empty score list"));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(contract(format!("non-finite similarity {s} for task {id}")));
    }
    let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let range = max - min;
    let mut bounds = [min; NUM_GROUPS];
    for (k, b) in bounds.iter_mut().enumerate().take(NUM_GROUPS - 1) {
        *b = min + range * (NUM_GROUPS - 1 - k) as f64 / NUM_GROUPS as f64;
    }
    let mut g = SimilarityGroups { bounds, min, max, members: Default::default(), degenerate: range == 0.0 };
    for &(id, s) in scores {
        let k = g.group_of(s);
        g.members[k].push(id);
    }
    Ok(g)
}

/// Mean IoU per (layer, group), aggregated over target tasks two ways.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub layers: usize,
    /// `per_target[t][l][g]`: mean IoU between target `t` and its group-`g`
    /// neighbours at layer `l`, if the group is non-empty.
    pub per_target: Vec<Vec<[Option<f64>; NUM_GROUPS]>>,
    /// Mean over targets of `per_target`, ignoring empty groups.
    pub target_mean: Vec<[f64; NUM_GROUPS]>,
    /// Mean over all (target, neighbour) pairs.
    pub pooled_mean: Vec<[f64; NUM_GROUPS]>,
    pub pair_count: Vec<[usize; NUM_GROUPS]>,
    /// Targets whose scores were all equal and so had no group structure.
    pub degenerate_targets: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapRow {
    pub layer: usize,
    pub group: usize,
    pub mean_iou: f64,
    pub pooled_iou: f64,
    pub pair_count: usize,
}

impl OverlapReport {
    /// Group-1 minus group-5 per-target mean IoU, per layer.
    pub fn gap(&self) -> Vec<f64> {
        self.target_mean.iter().map(|g| g[0] - g[NUM_GROUPS - 1]).collect()
    }

    pub fn rows(&self) -> Vec<OverlapRow> {
        let mut out = Vec::new();
        for l in 0..self.layers {
            for g in 0..NUM_GROUPS {
                out.push(OverlapRow {
                    layer: l,
                    group: g + 1,
                    mean_iou: self.target_mean[l][g],
                    pooled_iou: self.pooled_mean[l][g],
                    pair_count: self.pair_count[l][g],
                });
            }
        }
        out
    }

    /// Per-target group-1 minus group-5 differences at `layer`, for targets
    /// where both groups are populated.
    pub fn target_gaps(&self, layer: usize) -> Vec<f64> {
        self.per_target
            .iter()
            .filter_map(|t| match (t[layer][0], t[layer][NUM_GROUPS - 1]) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            })
            .collect()
    }
}

/// `similarity[i][j]` scores record `j` as a neighbour of target `i`
/// (diagonal ignored). Every record is used once as the target.
pub fn overlap_report(masks: &[Mask], similarity: &[Vec<f64>]) -> Result<OverlapReport> {
    let n = masks.len();
    if n < 2 || similarity.len() != n || similarity.iter().any(|r| r.len() != n) {
        return Err(contract("overlap report needs at least two masks and a square similarity matrix"));
    }
    let layers = masks[0].num_layers();
    if masks.iter().any(|m| m.widths() != masks[0].widths()) {
        return Err(contract("all masks in an overlap report must share one architecture"));
    }
    let mut per_target = Vec::with_capacity(n);
    let mut sums = vec![[0.0; NUM_GROUPS]; layers];
    let mut counts = vec![[0usize; NUM_GROUPS]; layers];
    let mut degenerate = 0;
    for i in 0..n {
        let scores: Vec<(u64, f64)> = (0..n).filter(|&j| j != i).map(|j| (j as u64, similarity[i][j])).collect();
        let groups = partition_similarity_groups(&scores)?;
        if groups.degenerate {
            degenerate += 1;
        }
        let mut t = vec![[None; NUM_GROUPS]; layers];
        for (g, members) in groups.members.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            for (l, slot) in t.iter_mut().enumerate() {
                let mut s = 0.0;
                for &j in members {
                    s += iou(&masks[i], &masks[j as usize], l)?;
                }
                sums[l][g] += s;
                counts[l][g] += members.len();
                slot[g] = Some(s / members.len() as f64);
            }
        }
        per_target.push(t);
    }
    let target_mean = (0..layers)
        .map(|l| {
            let mut out = [f64::NAN; NUM_GROUPS];
            for (g, o) in out.iter_mut().enumerate() {
                let v: Vec<f64> = per_target.iter().filter_map(|t| t[l][g]).collect();
                if !v.is_empty() {
                    *o = v.iter().sum::<f64>() / v.len() as f64;
                }
            }
            out
        })
        .collect();
    let pooled_mean = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            let mut out = [f64::NAN; NUM_GROUPS];
            for g in 0..NUM_GROUPS {
                if c[g] > 0 {
                    out[g] = s[g] / c[g] as f64;
                }
            }
            out
        })
        .collect();
    Ok(OverlapReport { layers, per_target, target_mean, pooled_mean, pair_count: counts, degenerate_targets: degenerate })
}

/// Expected IoU of two independent uniformly random `k`-subsets of `0..n`,
/// via the hypergeometric law of their intersection.
pub fn expected_random_iou(n: usize, k: usize) -> f64 {
    let ln_choose = |a: usize, b: usize| -> f64 { ln_factorial(a) - ln_factorial(b) - ln_factorial(a - b) };
    let total = ln_choose(n, k);
    let lo = (2 * k).saturating_sub(n);
    (lo..=k)
        .map(|i| {
            let p = (ln_choose(k, i) + ln_choose(n - k, k - i) - total).exp();
            p * i as f64 / (2 * k - i) as f64
        })
        .sum()
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// One-sided sign test of "differences tend to be positive".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// `P(X ≥ positive)` for `X ~ Binomial(positive + negative, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|&&d| d > 0.0).count();
    let negative = diffs.iter().filter(|&&d| d < 0.0).count();
    let n = positive + negative;
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let p_value = (positive..=n)
        .map(|i| (ln_factorial(n) - ln_factorial(i) - ln_factorial(n - i) - ln2n).exp())
        .sum::<f64>()
        .min(1.0);
    SignTest { positive, negative, ties: diffs.len() - n, p_value }
}
