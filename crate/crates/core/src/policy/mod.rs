//! Neural rebate policy and its training.

pub mod adam;
pub mod network;
mod pathwise;
pub mod train;

pub use adam::Adam;
pub use network::{FeatureScaling, PolicyNetwork};
pub use train::{
    batch_gradient, batch_loss, loss, loss_breakdown, train, train_with, GradientResult,
    IterationStats, JumpRecord, LossBreakdown, TrainConfig, TrainOutcome,
};
