//! Meta-vote pruning toolkit.
//!
//! Builds a zoo of structurally pruned models over a synthetic task universe
//! and initializes pruned sub-networks for new tasks by voting over the masks
//! of their most similar zoo tasks.

pub mod error;
pub mod experiment;
pub mod pruning;
pub mod seed;
pub mod metavote;
pub mod model;
pub mod similarity;
pub mod taskgen;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
