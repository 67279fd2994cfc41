use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{contract, Error, Result};
use crate::model::{ModelArch, ModelParams};
use crate::seed;
use crate::taskgen::{build_taxonomy_with_support, materialize_dataset, parse_tasks, sample_task_universe, write_tasks, DataConfig, DatasetSplit, Split, TaskSpec, Taxonomy};
use crate::model::trace;
use crate::tensor::{LrSchedule, Optimizer, OptimizerKind, SgdConfig, Tape};
use crate::train::{fine_tune, Sampler};

pub const TAXONOMY_FILE: &str = "taxonomy.txt";
pub const TASKS_FILE: &str = "tasks.txt";
pub const PRETRAINED_FILE: &str = "pretrained.bin";

/// Taxonomy plus task specs. Ids are `0..len`; the last
/// `ceil(test_fraction·len)` ids are test tasks, the rest train the zoo.
#[derive(Clone, Debug, PartialEq)]
pub struct Universe {
    pub taxonomy: Taxonomy,
    pub tasks: Vec<TaskSpec>,
    pub data: DataConfig,
    pub test_fraction: f64,
}

impl Universe {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let u = &cfg.universe;
        let taxonomy = build_taxonomy_with_support(u.branching, u.depth, u.proto_dim, u.support, cfg.seed)?;
        let tasks = sample_task_universe(&taxonomy, u.num_tasks, u.classes_per_task, cfg.seed)?;
        Ok(Self { taxonomy, tasks, data: u.data, test_fraction: u.test_fraction })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TAXONOMY_FILE), self.taxonomy.to_string())?;
        fs::write(dir.join(TASKS_FILE), write_tasks(&self.tasks))?;
        Ok(())
    }

    /// Reads files written by [`Universe::write`]; data settings come from `cfg`.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Config(format!("cannot read {}: {e} (run gen-tasks first)", dir.join(name).display())))
        };
        let taxonomy: Taxonomy = read(TAXONOMY_FILE)?.parse()?;
        let tasks = parse_tasks(&read(TASKS_FILE)?)?;
        if tasks.iter().enumerate().any(|(i, t)| t.id != i as u64) {
            return Err(Error::Parse("task ids must run 0..n in order".into()));
        }
        Ok(Self { taxonomy, tasks, data: cfg.universe.data, test_fraction: cfg.universe.test_fraction })
    }

    fn split_point(&self) -> usize {
        let test = ((self.tasks.len() as f64 * self.test_fraction) - 1e-9).ceil() as usize;
        self.tasks.len() - test.min(self.tasks.len())
    }

    pub fn train_ids(&self) -> Vec<u64> {
        (0..self.split_point() as u64).collect()
    }

    pub fn test_ids(&self) -> Vec<u64> {
        (self.split_point() as u64..self.tasks.len() as u64).collect()
    }

    pub fn task(&self, id: u64) -> Result<&TaskSpec> {
        self.tasks.get(id as usize).ok_or_else(|| contract(format!("no task {id} in a universe of {}", self.tasks.len())))
    }

    pub fn dataset(&self, id: u64) -> Result<DatasetSplit> {
        materialize_dataset(self.task(id)?, &self.taxonomy, &self.data)
    }

    /// The task over every leaf class, used for pretraining.
    pub fn all_classes(&self) -> TaskSpec {
        let data_seed = self.tasks.first().map_or(0, |t| t.data_seed);
        TaskSpec { id: u64::MAX, classes: (0..self.taxonomy.num_classes()).collect(), data_seed }
    }

    pub fn all_classes_train(&self) -> Result<Split> {
        Ok(materialize_dataset(&self.all_classes(), &self.taxonomy, &self.data)?.train)
    }
}

/// Trains the shared starting model on the training split of every leaf
/// class. With `activity_l1 > 0` the loss also carries that multiple of the
/// mean per-sample L1 norm of every unit output.
pub fn pretrain(cfg: &ExperimentConfig, universe: &Universe) -> Result<ModelParams> {
    let data = universe.all_classes_train()?;
    let arch = ModelArch::default_for(cfg.arch, universe.taxonomy.num_classes());
    let mut model = ModelParams::build(&arch, seed::derive_tag(cfg.seed, "pretrain-init"))?;
    let batches = seed::derive_tag(cfg.seed, "pretrain-batches");
    if cfg.activity_l1 == 0.0 {
        fine_tune(&mut model, &data, &cfg.pretrain, batches)?;
        return Ok(model);
    }
    let t = &cfg.pretrain;
    if t.iters == 0 {
        return Ok(model);
    }
    let sched = LrSchedule::new(t.lr, t.min_lr, t.iters)?;
    let mut opt = Optimizer::new(OptimizerKind::SgdMomentum(SgdConfig { momentum: t.momentum, weight_decay: t.weight_decay }));
    let mut sampler = Sampler::new(data.len(), t.batch_size, batches)?;
    let scales = vec![None; arch.num_prunable()];
    for it in 0..t.iters {
        let batch = data.batch(&sampler.next_batch())?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs.shape().to_vec(), batch.inputs.data().to_vec())?;
        let out = trace(&mut tape, &model, x, &scales, true)?;
        let mut loss = tape.cross_entropy(out.logits, &batch.labels)?;
        for &u in &out.units {
            let a = tape.sum_abs(u);
            let a = tape.scale(a, cfg.activity_l1 / batch.len() as f64);
            loss = tape.add(loss, a)?;
        }
        tape.backward(loss)?.write_into(model.tensors_mut().iter_mut(), &out.params)?;
        opt.step(model.tensors_mut().iter_mut(), sched.lr(it)?)?;
    }
    Ok(model)
}

/// The settings a pretrained model depends on, one `section.key=value` per line.
fn pretrain_key(cfg: &ExperimentConfig) -> String {
    cfg.entries()
        .into_iter()
        .filter(|(s, k, _)| matches!(*s, "run" | "universe" | "pretrain") || (*s == "model" && *k == "arch"))
        .map(|(s, k, v)| format!("{s}.{k}={v}\n"))
        .collect()
}

/// Loads the cached pretrained model from `dir`, training and saving it first
/// if it is absent or was trained under different settings.
pub fn load_or_pretrain(dir: &Path, cfg: &ExperimentConfig, universe: &Universe) -> Result<ModelParams> {
    let path = dir.join(PRETRAINED_FILE);
    let key = pretrain_key(cfg);
    let key_path = dir.join(format!("{PRETRAINED_FILE}.key"));
    if fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
        if let Ok(bytes) = fs::read(&path) {
            return ModelParams::read_from(&mut bytes.as_slice());
        }
    }
    let model = pretrain(cfg, universe)?;
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    model.write_to(&mut buf)?;
    let tmp = dir.join(format!("{PRETRAINED_FILE}.tmp"));
    fs::write(&tmp, buf)?;
    fs::rename(tmp, &path)?;
    fs::write(key_path, key)?;
    Ok(model)
}
