//! Early-cycle battery lifetime prediction from capacity-indexed feature maps.
//!
//! The pipeline turns raw per-cycle charge/discharge signals into a
//! `(6, H, W)` feature map per cell, then learns lifetime from two kinds of
//! differences:
//!
//! - **intra-cell**: every early cycle minus a fixed reference cycle of the
//!   same cell, regressed directly onto the (centered) lifetime;
//! - **inter-cell**: the target cell minus a reference cell with known
//!   lifetime, regressed onto the lifetime difference.
//!
//! Both encoders feed one shared linear head, trained on the joint objective.
//! At inference the inter-cell branch is ensembled over many reference cells
//! and blended with the intra-cell prediction.
//!
//! ## Module map
//!
//! - [`types`] - cells, cycles, feature maps, difference tensors, splits
//! - [`preprocess`] - rolling-median despiking, capacity normalization, Q-grid interpolation
//! - [`featurize`] - six-channel feature maps and difference tensors
//! - [`nn`] - dense tensors with tape-based reverse-mode autodiff
//! - [`model`] - two-branch model, joint loss, reference-ensemble prediction
//! - [`train`] - optimization loop, pair sampling, checkpoints
//! - [`eval`] - metrics, reference sweeps, ablations, low-resource runs
//! - [`data_io`] - cell file format, splits, synthetic degradation generator
//! - [`config`] - run configuration and its stable hash

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data_io;
mod error;
pub mod eval;
pub mod featurize;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use featurize::{FeatureStats, FeaturizeConfig};
pub use model::{BatModel, Combine, LossWeights};
pub use types::{CellRecord, CycleSignals, DiffTensor, FeatureMap, Sample, SplitConfig};
