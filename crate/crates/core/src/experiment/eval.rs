use super::build::task_seed;
use super::config::ExperimentConfig;
use super::universe::Universe;
use crate::error::{contract, Result};
use crate::metavote::{mvp, MvpConfig};
use crate::model::{Mask, ModelParams};
use crate::pruning::{ifp, ifp_schedule, random_prune, IfpConfig, PruneResult};
use crate::similarity::{leep_from_predictions, nearest, overlap_report, partition_similarity_groups, task_wup, Metric, OverlapReport, NUM_GROUPS};
use crate::taskgen::TaskSpec;
use crate::train::{predict_proba, TraceRow, TrainConfig};
use crate::zoo::ZooRecord;

/// Scores zoo records as neighbours of arbitrary tasks of one universe.
///
/// For LEEP every record's class probabilities are computed once over the
/// training samples of all leaf classes. A task's training split is those
/// samples restricted to its classes, because all tasks share a data seed.
pub struct SimilarityIndex<'a> {
    metric: Metric,
    universe: &'a Universe,
    ids: Vec<u64>,
    classes: Vec<Vec<usize>>,
    /// `theta[r]`: row-major `[classes·per_class, z_r]` probabilities.
    theta: Vec<(usize, Vec<f64>)>,
}

impl<'a> SimilarityIndex<'a> {
    pub fn new(metric: Metric, universe: &'a Universe, records: &[ZooRecord]) -> Result<Self> {
        let theta = match metric {
            Metric::Wup => Vec::new(),
            Metric::Leep => {
                let all = universe.all_classes_train()?;
                records
                    .iter()
                    .map(|r| {
                        let p = predict_proba(&r.params, &all.inputs)?;
                        Ok((p.shape()[1], p.data().to_vec()))
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            metric,
            universe,
            ids: records.iter().map(|r| r.task_id).collect(),
            classes: records.iter().map(|r| r.classes.clone()).collect(),
            theta,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// `(record task id, score)` for every record, higher meaning more similar.
    pub fn scores(&self, target: &TaskSpec) -> Result<Vec<(u64, f64)>> {
        if target.data_seed != self.universe.all_classes().data_seed {
            return Err(contract("similarity index only covers tasks sharing the universe data seed"));
        }
        let per = self.universe.data.train_per_class;
        let labels: Vec<usize> = (0..target.classes.len()).flat_map(|y| std::iter::repeat_n(y, per)).collect();
        (0..self.ids.len())
            .map(|r| {
                let s = match self.metric {
                    Metric::Wup => task_wup(&self.universe.taxonomy, &target.classes, &self.classes[r])?,
                    Metric::Leep => {
                        let (z, all) = &self.theta[r];
                        let mut rows = Vec::with_capacity(labels.len() * z);
                        for &c in &target.classes {
                            rows.extend_from_slice(&all[c * per * z..(c + 1) * per * z]);
                        }
                        leep_from_predictions(&rows, *z, &labels, target.classes.len())?
                    }
                };
                Ok((self.ids[r], s))
            })
            .collect()
    }
}

/// Mean IoU by similarity group with every record as a target in turn.
pub fn overlap_analysis(universe: &Universe, records: &[ZooRecord], metric: Metric) -> Result<OverlapReport> {
    let index = SimilarityIndex::new(metric, universe, records)?;
    let sim = records
        .iter()
        .map(|r| Ok(index.scores(universe.task(r.task_id)?)?.into_iter().map(|(_, s)| s).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let masks: Vec<Mask> = records.iter().map(|r| r.mask.clone()).collect();
    overlap_report(&masks, &sim)
}

/// One method applied to one task.
#[derive(Clone, Debug)]
pub struct TaskRun {
    pub task_id: u64,
    pub method: String,
    pub accuracy: f64,
    pub mask: Mask,
    pub trace: Vec<TraceRow>,
    pub neighbours: Vec<u64>,
}

impl TaskRun {
    fn from_result(task_id: u64, method: &str, res: PruneResult, neighbours: Vec<u64>) -> Self {
        Self { task_id, method: method.into(), accuracy: res.accuracy, mask: res.mask, trace: res.trace, neighbours }
    }
}

/// IFP settings for a budget of `iters` iterations: the configured period if
/// it fits, otherwise the largest period that leaves one period of
/// fine-tuning after the last pruning event.
pub fn ifp_for_budget(base: &IfpConfig, widths: &[usize], iters: usize) -> IfpConfig {
    let events = widths
        .iter()
        .map(|&n| ifp_schedule(n, base.percent, base.target.keep(n)).len() - 1)
        .max()
        .unwrap_or(0);
    let mut cfg = IfpConfig { iters, ..*base };
    if events * cfg.period > iters {
        cfg.period = (iters / (events + 1)).max(1);
    }
    cfg
}

/// Runs the comparison methods on test tasks against one zoo.
pub struct Evaluator<'a> {
    pub cfg: &'a ExperimentConfig,
    pub universe: &'a Universe,
    pub pretrained: &'a ModelParams,
    pub records: &'a [ZooRecord],
}

impl<'a> Evaluator<'a> {
    /// The first `eval_tasks` test task ids.
    pub fn eval_ids(&self) -> Vec<u64> {
        self.universe.test_ids().into_iter().take(self.cfg.eval_tasks).collect()
    }

    fn seed(&self, task_id: u64) -> u64 {
        task_seed(self.cfg, "eval", task_id)
    }

    fn record(&self, id: u64) -> Result<&ZooRecord> {
        self.records.iter().find(|r| r.task_id == id).ok_or_else(|| contract(format!("task {id} is not in the zoo")))
    }

    /// Top-`n` records by `index` score for `task_id`.
    pub fn neighbours(&self, index: &SimilarityIndex<'_>, task_id: u64, n: usize) -> Result<Vec<u64>> {
        nearest(&index.scores(self.universe.task(task_id)?)?, task_id, n)
    }

    /// For each similarity group (most similar first), the top-`n` members by
    /// score, or all members when the group has fewer.
    pub fn group_neighbours(&self, index: &SimilarityIndex<'_>, task_id: u64, n: usize) -> Result<[Vec<u64>; NUM_GROUPS]> {
        let scores: Vec<(u64, f64)> = index.scores(self.universe.task(task_id)?)?.into_iter().filter(|s| s.0 != task_id).collect();
        let groups = partition_similarity_groups(&scores)?;
        let mut out: [Vec<u64>; NUM_GROUPS] = Default::default();
        for (g, members) in groups.members.iter().enumerate() {
            let sub: Vec<(u64, f64)> = scores.iter().copied().filter(|s| members.contains(&s.0)).collect();
            out[g] = nearest(&sub, task_id, n.min(sub.len()))?;
        }
        Ok(out)
    }

    pub fn mvp(&self, task_id: u64, mvp_cfg: &MvpConfig, neighbours: &[u64]) -> Result<TaskRun> {
        let data = self.universe.dataset(task_id)?;
        let donors = neighbours
            .iter()
            .map(|&id| self.record(id).map(|r| (&r.mask, &r.params)))
            .collect::<Result<Vec<_>>>()?;
        let res = mvp(self.pretrained, &donors, &data, mvp_cfg, self.seed(task_id))?;
        Ok(TaskRun::from_result(task_id, "mvp", res, neighbours.to_vec()))
    }

    pub fn random(&self, task_id: u64, train: &TrainConfig) -> Result<TaskRun> {
        let data = self.universe.dataset(task_id)?;
        let res = random_prune(self.pretrained, &data, self.cfg.mvp.target, train, self.seed(task_id))?;
        Ok(TaskRun::from_result(task_id, "random", res, Vec::new()))
    }

    /// IFP on the task itself with a total budget of `iters` iterations.
    pub fn ifp_scratch(&self, task_id: u64, iters: usize) -> Result<TaskRun> {
        let data = self.universe.dataset(task_id)?;
        let cfg = ifp_for_budget(&self.cfg.ifp, &self.pretrained.arch().widths(), iters);
        let res = ifp(self.pretrained, &data, &cfg, self.seed(task_id))?;
        Ok(TaskRun::from_result(task_id, "ifp", res, Vec::new()))
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }

    /// Accuracy fractions as percentages, e.g. `88.98±0.38`.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}
