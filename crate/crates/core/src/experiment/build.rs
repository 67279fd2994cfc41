use std::sync::Mutex;

use rayon::prelude::*;

use super::config::{ExperimentConfig, ZooMethod};
use super::universe::Universe;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pruning::{ahnp, ifp, PruneResult};
use crate::seed;
use crate::zoo::{RecordMeta, ZooRecord, ZooStore};

/// Seed of one task's job under a named stream.
pub fn task_seed(cfg: &ExperimentConfig, stream: &str, task_id: u64) -> u64 {
    seed::derive(seed::derive_tag(cfg.seed, stream), task_id)
}

/// Prunes one training task with the configured zoo method.
pub fn prune_for_zoo(cfg: &ExperimentConfig, universe: &Universe, pretrained: &ModelParams, task_id: u64) -> Result<ZooRecord> {
    let data = universe.dataset(task_id)?;
    let s = task_seed(cfg, "zoo", task_id);
    let method = cfg.zoo_method();
    let (res, criterion, iterations): (PruneResult, String, usize) = match method {
        ZooMethod::Ifp => (ifp(pretrained, &data, &cfg.ifp, s)?, cfg.ifp.criterion.to_string(), cfg.ifp.iters),
        ZooMethod::Ahnp => (ahnp(pretrained, &data, &cfg.ahnp, s)?, "gate".into(), cfg.ahnp.iters + cfg.ahnp.finetune_iters),
    };
    let meta = RecordMeta {
        method: method.as_str().into(),
        criterion,
        r: cfg.ratio,
        iterations,
        accuracy: res.accuracy,
        seed: s,
    };
    ZooRecord::new(task_id, universe.task(task_id)?.classes.clone(), pretrained.arch(), res.mask, &res.params, meta)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub built: Vec<u64>,
    /// Already present in the store.
    pub skipped: Vec<u64>,
    pub failures: Vec<(u64, String)>,
}

/// Progress notifications from [`build_zoo`].
#[derive(Clone, Debug, PartialEq)]
pub enum BuildEvent {
    Built { task_id: u64, accuracy: f64, done: usize, total: usize },
    Failed { task_id: u64, error: String },
}

/// Prunes every training task not yet in `store` on a pool of `workers`
/// threads. A failing task is reported and the rest carry on.
pub fn build_zoo(
    cfg: &ExperimentConfig,
    universe: &Universe,
    pretrained: &ModelParams,
    store: &ZooStore,
    workers: usize,
    progress: &(dyn Fn(&BuildEvent) + Sync),
) -> Result<BuildReport> {
    cfg.validate()?;
    store.register_arch(pretrained.arch())?;
    let manifest = store.manifest()?;
    let (skipped, todo): (Vec<u64>, Vec<u64>) = universe.train_ids().into_iter().partition(|&id| manifest.contains(id));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let report = Mutex::new(BuildReport { skipped, ..BuildReport::default() });
    let total = todo.len();
    pool.install(|| {
        todo.par_iter().for_each(|&id| {
            let outcome = prune_for_zoo(cfg, universe, pretrained, id).and_then(|rec| {
                let acc = rec.meta.accuracy;
                store.append(&rec).map(|_| acc)
            });
            let mut r = report.lock().unwrap_or_else(|e| e.into_inner());
            let event = match outcome {
                Ok(accuracy) => {
                    r.built.push(id);
                    BuildEvent::Built { task_id: id, accuracy, done: r.built.len() + r.failures.len(), total }
                }
                Err(e) => {
                    r.failures.push((id, e.to_string()));
                    BuildEvent::Failed { task_id: id, error: e.to_string() }
                }
            };
            progress(&event);
        })
    });
    let mut r = report.into_inner().unwrap_or_else(|e| e.into_inner());
    r.built.sort_unstable();
    r.failures.sort_by_key(|f| f.0);
    Ok(r)
}

/// Records of `store` in task-id order.
pub fn load_zoo(store: &ZooStore) -> Result<Vec<ZooRecord>> {
    let mut recs = store.load_all()?;
    recs.sort_by_key(|r| r.task_id);
    Ok(recs)
}
