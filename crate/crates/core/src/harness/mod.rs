//! Desk-scale continual learning: task streams, replay memory, the tiny
//! model and its training loop.

pub mod buffer;
pub mod model;
pub mod stream;
pub mod train;

pub use buffer::{sample_batch, BufferPolicy, MemoryBuffer, TaskBatch};
pub use model::{Activation, ModelConfig, TinyModel};
pub use stream::{make_gaussian_stream, Sample, StreamConfig, TaskData, TaskStream};
pub use train::{evaluate, train_continual, DiagRow, EvalReport, Protocol, TrainConfig, TrainOutcome};
