//! Synthetic task universe over a class taxonomy.
//!
//! Each leaf class has a prototype vector; siblings share most of their
//! prototype, so data similarity follows tree distance and task similarity has
//! a known ground truth.

mod dataset;
mod pgm;
mod taxonomy;

pub use dataset::{
    basis, materialize_dataset, parse_tasks, render, sample_task_universe, write_tasks, DataConfig, DatasetSplit,
    Split, TaskSpec,
};
pub use pgm::{center_crop_resize, decode_pgm, load_pgm_folder};
pub use taxonomy::{build_taxonomy, build_taxonomy_with_support, Node, Taxonomy, DECAY, PERTURBATION, SUPPORT};
