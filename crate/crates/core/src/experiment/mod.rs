//! End-to-end runs over a generated task universe: pretraining, zoo
//! building, neighbour search, method comparisons, overlap study and
//! ablations.

mod ablate;
mod build;
mod config;
mod eval;
mod universe;

pub use ablate::{ablate, ablate_criterion, aggregate, AblationAxis, AblationRow};
pub use build::{build_zoo, load_zoo, prune_for_zoo, task_seed, BuildEvent, BuildReport};
pub use config::{AblationConfig, ExperimentConfig, UniverseConfig, ZooMethod};
pub use eval::{ifp_for_budget, overlap_analysis, Evaluator, SimilarityIndex, Summary, TaskRun};
pub use universe::{load_or_pretrain, pretrain, Universe, PRETRAINED_FILE, TASKS_FILE, TAXONOMY_FILE};
