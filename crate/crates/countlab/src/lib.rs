//! Desk-scale laboratory for studying how attention softmax and layer
//! normalization affect out-of-distribution counting.
//!
//! The crate bundles a small f64 autodiff engine, an ablation-configurable
//! single-layer transformer encoder, grid-counting and identity tasks,
//! reference counting algorithms used as ground truth, and an experiment
//! harness with training, evaluation, and diagnostics.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, TensorId};
pub use params::{CheckpointError, ParamSet};
pub use tensor::{Tensor, TensorError};
