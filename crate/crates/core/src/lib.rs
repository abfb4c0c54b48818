//! Analytic tooling for convolutional backbones aimed at tiny-object detection.
//!
//! - [`arch`]: architecture IR, validation, TOML config format and the builtin backbones.
//! - [`cost`]: shape propagation, parameter and MAC accounting, stride ladders, receptive fields.
//! - [`rebalance`]: synthesis of bottom-heavy variants under a FLOPs-parity constraint.
//! - [`eval`]: size-stratified mAP over absolute-size intervals.
//! - [`tiler`]: overlapping tile plans, annotation remapping and prediction merging.
//!
//! Data-parallel loops go through [`exec::Execution`]; with the default
//! `parallel` feature they run on rayon, otherwise sequentially. Results are
//! identical either way.

pub mod arch;
pub mod cost;
pub mod eval;
pub mod exec;
pub mod rebalance;
pub mod tiler;

pub use arch::{builtin, parse_arch, serialize_arch, validate, ArchSpec};
pub use cost::{analyze, TensorShape};
pub use exec::Execution;
