// SPDX-License-Identifier: Apache-2.0

//! Expressive attention (EA) versus dot-product attention (DPA) on the NT
//! family of modular sequence tasks.
//!
//! * [`tasks`]: NT / NT-S / NT-R generators and exact cycle enumeration
//! * [`numeric`]: dense matrices, layer norm, finite-difference checks
//! * [`attention`]: the two causal attention kernels
//! * [`model`]: the one-block transformer with a hand-written backward pass
//! * [`training`]: online SGD with momentum, autoregressive evaluation,
//!   task mixtures and multi-seed aggregation
//! * [`experiment`]: JSON experiment configs, presets and run directories

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod tasks;
pub mod training;

pub use attention::{AttentionKernelSpec, AttentionKind};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, WeightSharing};
pub use numeric::Matrix;
pub use tasks::{CycleDecomposition, SequenceState, Symbol, TaskSpec, Variant};
pub use training::{RunMetrics, TaskMixture, TrainConfig};
