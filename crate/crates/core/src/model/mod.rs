//! Model substrates with explicit prunable units.
//!
//! Every architecture exposes its prunable layers as unit counts `n_ℓ`. A unit
//! is a conv filter, a dense node, or an attention head; the parameter layout
//! table ([`ParamSpec`]) records which tensor axes each unit owns, and all
//! structural operations (shrinking, gate folding, donor averaging) are
//! expressed as gathers over that table.

mod arch;
mod forward;
mod importance;
mod mask;
mod params;

pub use arch::{ArchKind, AxisOwner, Init, ModelArch, ParamSpec, Role};
pub use forward::{trace, unit_scales, Traced};
pub use importance::{unit_activation_importance, unit_importance, unit_taylor_importance, Criterion};
pub use mask::{GateScores, Mask};
pub use params::ModelParams;

pub(crate) use params::{axis_indices, gather, strides};
