use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metavote::MvpConfig;
use crate::model::{ArchKind, Criterion};
use crate::pruning::{AhnpConfig, IfpConfig, PruneTarget};
use crate::similarity::Metric;
use crate::taskgen::{DataConfig, SUPPORT};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct UniverseConfig {
    pub branching: usize,
    pub depth: usize,
    pub proto_dim: usize,
    /// Share of prototype coordinates each internal node perturbs.
    pub support: f64,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Share of task ids, taken from the end, held out as test tasks.
    pub test_fraction: f64,
    pub data: DataConfig,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            branching: 4,
            depth: 4,
            proto_dim: 32,
            support: SUPPORT,
            num_tasks: 200,
            classes_per_task: 5,
            test_fraction: 0.1,
            data: DataConfig { jitter: 0.3, ..DataConfig::default() },
        }
    }
}

/// Which procedure fills the zoo.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZooMethod {
    Ifp,
    Ahnp,
}

impl ZooMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ZooMethod::Ifp => "ifp",
            ZooMethod::Ahnp => "ahnp",
        }
    }

    /// IFP for convolutional and dense models, AHNP for the transformer.
    pub fn for_arch(kind: ArchKind) -> Self {
        match kind {
            ArchKind::TinyTransformer => ZooMethod::Ahnp,
            _ => ZooMethod::Ifp,
        }
    }
}

impl FromStr for ZooMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ifp" => Ok(ZooMethod::Ifp),
            "ahnp" => Ok(ZooMethod::Ahnp),
            other => Err(Error::Parse(format!("unknown zoo method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub iters: Vec<usize>,
    pub neighbours: Vec<usize>,
    pub metrics: Vec<Metric>,
    pub temperatures: Vec<f64>,
    pub criteria: Vec<Criterion>,
    /// Fine-tuning budgets of the similarity-group runs.
    pub group_iters: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            iters: vec![0, 20, 50, 100, 200],
            neighbours: vec![1, 2, 3, 5, 8],
            metrics: vec![Metric::Leep, Metric::Wup],
            temperatures: vec![0.25, 0.5, 1.0, 2.0],
            criteria: vec![Criterion::Activation, Criterion::Taylor],
            group_iters: vec![20, 100],
        }
    }
}

/// Every knob of a run. Together with `seed` it determines all outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub universe: UniverseConfig,
    pub arch: ArchKind,
    pub ratio: f64,
    pub pretrain: TrainConfig,
    /// Weight of the unit-activity L1 penalty during pretraining.
    pub activity_l1: f64,
    /// `None` picks the method from the architecture.
    pub zoo_method: Option<ZooMethod>,
    pub ifp: IfpConfig,
    pub ahnp: AhnpConfig,
    pub mvp: MvpConfig,
    pub metric: Metric,
    /// Number of test tasks used by evaluation commands.
    pub eval_tasks: usize,
    pub ablate: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let target = PruneTarget::new(0.9).expect("valid ratio");
        Self {
            seed: 0,
            universe: UniverseConfig::default(),
            arch: ArchKind::Mlp,
            ratio: 0.9,
            pretrain: TrainConfig { iters: 6000, batch_size: 128, lr: 0.05, ..TrainConfig::default() },
            activity_l1: 0.004,
            zoo_method: None,
            ifp: IfpConfig::new(target),
            ahnp: AhnpConfig::new(target),
            mvp: MvpConfig { temperature: 0.25, ..MvpConfig::new(target) },
            metric: Metric::Leep,
            eval_tasks: 20,
            ablate: AblationConfig::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

impl ExperimentConfig {
    /// `(section, key, value)` for every setting, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let u = &self.universe;
        let d = &u.data;
        let (i, a, m, ab) = (&self.ifp, &self.ahnp, &self.mvp, &self.ablate);
        vec![
            ("run", "seed", self.seed.to_string()),
            ("universe", "branching", u.branching.to_string()),
            ("universe", "depth", u.depth.to_string()),
            ("universe", "proto_dim", u.proto_dim.to_string()),
            ("universe", "support", format!("{:?}", u.support)),
            ("universe", "num_tasks", u.num_tasks.to_string()),
            ("universe", "classes_per_task", u.classes_per_task.to_string()),
            ("universe", "test_fraction", format!("{:?}", u.test_fraction)),
            ("universe", "noise", format!("{:?}", d.noise)),
            ("universe", "jitter", format!("{:?}", d.jitter)),
            ("universe", "train_per_class", d.train_per_class.to_string()),
            ("universe", "val_per_class", d.val_per_class.to_string()),
            ("universe", "test_per_class", d.test_per_class.to_string()),
            ("model", "arch", self.arch.as_str().to_string()),
            ("model", "ratio", format!("{:?}", self.ratio)),
            ("pretrain", "iters", self.pretrain.iters.to_string()),
            ("pretrain", "batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain", "lr", format!("{:?}", self.pretrain.lr)),
            ("pretrain", "activity_l1", format!("{:?}", self.activity_l1)),
            ("zoo", "method", self.zoo_method.map_or("auto", ZooMethod::as_str).to_string()),
            ("ifp", "iters", i.iters.to_string()),
            ("ifp", "period", i.period.to_string()),
            ("ifp", "percent", format!("{:?}", i.percent)),
            ("ifp", "criterion", i.criterion.to_string()),
            ("ifp", "batch_size", i.batch_size.to_string()),
            ("ifp", "lr", format!("{:?}", i.lr)),
            ("ifp", "score_batch", i.score_batch.to_string()),
            ("ahnp", "iters", a.iters.to_string()),
            ("ahnp", "finetune_iters", a.finetune_iters.to_string()),
            ("ahnp", "gate_threshold", format!("{:?}", a.gate_threshold)),
            ("ahnp", "l1", format!("{:?}", a.l1)),
            ("ahnp", "lr_inherited", format!("{:?}", a.lr_inherited)),
            ("ahnp", "lr_gates", format!("{:?}", a.lr_gates)),
            ("ahnp", "lr_classifier", format!("{:?}", a.lr_classifier)),
            ("ahnp", "batch_size", a.batch_size.to_string()),
            ("mvp", "neighbours", m.neighbours.to_string()),
            ("mvp", "temperature", format!("{:?}", m.temperature)),
            ("mvp", "iters", m.train.iters.to_string()),
            ("mvp", "batch_size", m.train.batch_size.to_string()),
            ("mvp", "lr", format!("{:?}", m.train.lr)),
            ("mvp", "metric", self.metric.to_string()),
            ("mvp", "eval_tasks", self.eval_tasks.to_string()),
            ("ablate", "iters", list(&ab.iters)),
            ("ablate", "neighbours", list(&ab.neighbours)),
            ("ablate", "metrics", list(&ab.metrics)),
            ("ablate", "temperatures", list(&ab.temperatures.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>())),
            ("ablate", "criteria", list(&ab.criteria)),
            ("ablate", "group_iters", list(&ab.group_iters)),
        ]
    }

    /// Sets one value; unknown keys are an error so typos do not pass silently.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let k = format!("{section}.{key}");
        let k = k.as_str();
        match (section, key) {
            ("run", "seed") => self.seed = parse(k, v)?,
            ("universe", "branching") => self.universe.branching = parse(k, v)?,
            ("universe", "depth") => self.universe.depth = parse(k, v)?,
            ("universe", "proto_dim") => self.universe.proto_dim = parse(k, v)?,
            ("universe", "support") => self.universe.support = parse(k, v)?,
            ("universe", "num_tasks") => self.universe.num_tasks = parse(k, v)?,
            ("universe", "classes_per_task") => self.universe.classes_per_task = parse(k, v)?,
            ("universe", "test_fraction") => self.universe.test_fraction = parse(k, v)?,
            ("universe", "noise") => self.universe.data.noise = parse(k, v)?,
            ("universe", "jitter") => self.universe.data.jitter = parse(k, v)?,
            ("universe", "train_per_class") => self.universe.data.train_per_class = parse(k, v)?,
            ("universe", "val_per_class") => self.universe.data.val_per_class = parse(k, v)?,
            ("universe", "test_per_class") => self.universe.data.test_per_class = parse(k, v)?,
            ("model", "arch") => self.arch = parse(k, v)?,
            ("model", "ratio") => self.ratio = parse(k, v)?,
            ("pretrain", "iters") => self.pretrain.iters = parse(k, v)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = parse(k, v)?,
            ("pretrain", "lr") => self.pretrain.lr = parse(k, v)?,
            ("pretrain", "activity_l1") => self.activity_l1 = parse(k, v)?,
            ("zoo", "method") => self.zoo_method = if v.trim() == "auto" { None } else { Some(parse(k, v)?) },
            ("ifp", "iters") => self.ifp.iters = parse(k, v)?,
            ("ifp", "period") => self.ifp.period = parse(k, v)?,
            ("ifp", "percent") => self.ifp.percent = parse(k, v)?,
            ("ifp", "criterion") => self.ifp.criterion = parse(k, v)?,
            ("ifp", "batch_size") => self.ifp.batch_size = parse(k, v)?,
            ("ifp", "lr") => self.ifp.lr = parse(k, v)?,
            ("ifp", "score_batch") => self.ifp.score_batch = parse(k, v)?,
            ("ahnp", "iters") => self.ahnp.iters = parse(k, v)?,
            ("ahnp", "finetune_iters") => self.ahnp.finetune_iters = parse(k, v)?,
            ("ahnp", "gate_threshold") => self.ahnp.gate_threshold = parse(k, v)?,
            ("ahnp", "l1") => self.ahnp.l1 = parse(k, v)?,
            ("ahnp", "lr_inherited") => self.ahnp.lr_inherited = parse(k, v)?,
            ("ahnp", "lr_gates") => self.ahnp.lr_gates = parse(k, v)?,
            ("ahnp", "lr_classifier") => self.ahnp.lr_classifier = parse(k, v)?,
            ("ahnp", "batch_size") => self.ahnp.batch_size = parse(k, v)?,
            ("mvp", "neighbours") => self.mvp.neighbours = parse(k, v)?,
            ("mvp", "temperature") => self.mvp.temperature = parse(k, v)?,
            ("mvp", "iters") => self.mvp.train.iters = parse(k, v)?,
            ("mvp", "batch_size") => self.mvp.train.batch_size = parse(k, v)?,
            ("mvp", "lr") => self.mvp.train.lr = parse(k, v)?,
            ("mvp", "metric") => self.metric = parse(k, v)?,
            ("mvp", "eval_tasks") => self.eval_tasks = parse(k, v)?,
            ("ablate", "iters") => self.ablate.iters = parse_list(k, v)?,
            ("ablate", "neighbours") => self.ablate.neighbours = parse_list(k, v)?,
            ("ablate", "metrics") => self.ablate.metrics = parse_list(k, v)?,
            ("ablate", "temperatures") => self.ablate.temperatures = parse_list(k, v)?,
            ("ablate", "criteria") => self.ablate.criteria = parse_list(k, v)?,
            ("ablate", "group_iters") => self.ablate.group_iters = parse_list(k, v)?,
            _ => return Err(Error::Config(format!("unknown setting {k}"))),
        }
        if key == "ratio" {
            let t = PruneTarget::new(self.ratio)?;
            self.ifp.target = t;
            self.ahnp.target = t;
            self.mvp.target = t;
        }
        Ok(())
    }

    pub fn zoo_method(&self) -> ZooMethod {
        self.zoo_method.unwrap_or_else(|| ZooMethod::for_arch(self.arch))
    }

    pub fn validate(&self) -> Result<()> {
        PruneTarget::new(self.ratio)?;
        if !(self.universe.test_fraction > 0.0 && self.universe.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        self.mvp.validate()?;
        self.ahnp.validate()?;
        if self.ablate.temperatures.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("ablation temperatures must be positive".into()));
        }
        Ok(())
    }

    /// INI text with one section per group; parsing it back reproduces `self`.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k, v) in self.entries() {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical().as_bytes())[..8])
    }
}
