use std::fmt;
use std::str::FromStr;

use super::eval::{Evaluator, SimilarityIndex, Summary};
use crate::error::{Error, Result};
use crate::metavote::MvpConfig;
use crate::model::Criterion;
use crate::zoo::ZooRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Iterations,
    Neighbours,
    Metric,
    Temperature,
    Criterion,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] =
        [AblationAxis::Iterations, AblationAxis::Neighbours, AblationAxis::Metric, AblationAxis::Temperature, AblationAxis::Criterion];
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Iterations => "iterations",
            AblationAxis::Neighbours => "neighbours",
            AblationAxis::Metric => "metric",
            AblationAxis::Temperature => "temperature",
            AblationAxis::Criterion => "criterion",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown ablation axis {s:?}")))
    }
}

/// One sweep point applied to one test task.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub method: String,
    /// Similarity group the neighbours were drawn from, 1 = most similar.
    pub group: Option<usize>,
    pub iters: usize,
    pub task_id: u64,
    pub accuracy: f64,
}

/// Summary over tasks for each distinct `(value, method, group, iters)`, in
/// order of first appearance.
pub fn aggregate(rows: &[AblationRow]) -> Vec<(AblationRow, Summary)> {
    let mut keys: Vec<AblationRow> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| same_point(k, r)) {
            keys.push(r.clone());
        }
    }
    keys.into_iter()
        .map(|k| {
            let acc: Vec<f64> = rows.iter().filter(|r| same_point(&k, r)).map(|r| r.accuracy).collect();
            (k, Summary::of(&acc))
        })
        .collect()
}

fn same_point(a: &AblationRow, b: &AblationRow) -> bool {
    a.axis == b.axis && a.value == b.value && a.method == b.method && a.group == b.group && a.iters == b.iters
}

fn row(axis: AblationAxis, value: impl ToString, method: &str, group: Option<usize>, iters: usize, task_id: u64, accuracy: f64) -> AblationRow {
    AblationRow { axis, value: value.to_string(), method: method.into(), group, iters, task_id, accuracy }
}

/// Sweeps one axis over the evaluator's test tasks. The criterion axis needs
/// one zoo per criterion; see [`ablate_criterion`].
pub fn ablate(ev: &Evaluator<'_>, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let cfg = ev.cfg;
    let base = cfg.mvp;
    let j = base.train.iters;
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Iterations => {
            let index = SimilarityIndex::new(cfg.metric, ev.universe, ev.records)?;
            let widths = ev.pretrained.arch().widths();
            for id in ev.eval_ids() {
                let nb = ev.neighbours(&index, id, base.neighbours)?;
                for &iters in &cfg.ablate.iters {
                    let mut m = base;
                    m.train.iters = iters;
                    rows.push(row(axis, iters, "mvp", None, iters, id, ev.mvp(id, &m, &nb)?.accuracy));
                    rows.push(row(axis, iters, "random", None, iters, id, ev.random(id, &m.train)?.accuracy));
                    if iters > 0 && super::eval::ifp_for_budget(&cfg.ifp, &widths, iters).validate(&widths).is_ok() {
                        rows.push(row(axis, iters, "ifp", None, iters, id, ev.ifp_scratch(id, iters)?.accuracy));
                    }
                }
            }
        }
        AblationAxis::Neighbours => {
            let index = SimilarityIndex::new(cfg.metric, ev.universe, ev.records)?;
            for id in ev.eval_ids() {
                for &n in &cfg.ablate.neighbours {
                    let nb = ev.neighbours(&index, id, n)?;
                    let m = MvpConfig { neighbours: n, ..base };
                    rows.push(row(axis, n, "mvp", None, j, id, ev.mvp(id, &m, &nb)?.accuracy));
                }
            }
        }
        AblationAxis::Metric => {
            for &metric in &cfg.ablate.metrics {
                let index = SimilarityIndex::new(metric, ev.universe, ev.records)?;
                for id in ev.eval_ids() {
                    let nb = ev.neighbours(&index, id, base.neighbours)?;
                    rows.push(row(axis, metric, "mvp", None, j, id, ev.mvp(id, &base, &nb)?.accuracy));
                    for (g, nb) in ev.group_neighbours(&index, id, base.neighbours)?.iter().enumerate() {
                        if nb.is_empty() {
                            continue;
                        }
                        for &iters in &cfg.ablate.group_iters {
                            let mut m = base;
                            m.train.iters = iters;
                            rows.push(row(axis, metric, "mvp", Some(g + 1), iters, id, ev.mvp(id, &m, nb)?.accuracy));
                        }
                    }
                }
            }
        }
        AblationAxis::Temperature => {
            let index = SimilarityIndex::new(cfg.metric, ev.universe, ev.records)?;
            for id in ev.eval_ids() {
                let nb = ev.neighbours(&index, id, base.neighbours)?;
                for &t in &cfg.ablate.temperatures {
                    let m = MvpConfig { temperature: t, ..base };
                    rows.push(row(axis, format!("{t:?}"), "mvp", None, j, id, ev.mvp(id, &m, &nb)?.accuracy));
                }
            }
        }
        AblationAxis::Criterion => {
            return Err(Error::Config("the criterion sweep needs one zoo per criterion".into()));
        }
    }
    Ok(rows)
}

/// MVP over zoos built with different importance criteria.
pub fn ablate_criterion(ev: &Evaluator<'_>, zoos: &[(Criterion, &[ZooRecord])]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &(criterion, records) in zoos {
        let sub = Evaluator { records, ..*ev };
        let index = SimilarityIndex::new(ev.cfg.metric, ev.universe, records)?;
        for id in sub.eval_ids() {
            let nb = sub.neighbours(&index, id, ev.cfg.mvp.neighbours)?;
            let acc = sub.mvp(id, &ev.cfg.mvp, &nb)?.accuracy;
            rows.push(row(AblationAxis::Criterion, criterion, "mvp", None, ev.cfg.mvp.train.iters, id, acc));
        }
    }
    Ok(rows)
}
