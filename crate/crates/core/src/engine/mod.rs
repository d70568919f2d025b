//! Optimizer, learning-rate schedule, training loop, and checkpointing.

pub mod checkpoint;
mod optim;
mod train;

pub use optim::{lr_schedule, AdamWHyper, OptimizerState};
pub use train::{train, BatchSource, LossParts, Objective, ObjectiveSet, TrainConfig, TrainSummary};
