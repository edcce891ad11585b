//! Adaptive balance of batch normalization for continual learning.
//!
//! The crate covers the numerical pieces (tensors, normalization statistics,
//! momentum schedules, task-weight analysis, the adaptive normalization layer
//! with its backward pass) and a small continual-learning harness used to
//! exercise them.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod harness;
pub mod layer;
pub mod momentum;
pub mod rng;
pub mod sink;
pub mod stats;
pub mod tensor;
pub mod weights;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use layer::{Concentration, LayerConfig, NormLayer, NormMode};
pub use momentum::{MomentumSchedule, PopulationStats, ScheduleKind};
pub use rng::Rng;
pub use stats::{AffineParams, GroupStats, Stats};
pub use tensor::Tensor3;
pub use weights::{BatchSchedule, ReplaySplit, TaskWeights};
