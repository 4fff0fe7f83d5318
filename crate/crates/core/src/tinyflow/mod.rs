//! Velocity-field models: the trainable residual MLP and closed-form test fields.

pub mod analytic;
pub mod checkpoint;
pub mod mlp;
pub mod train;

pub use analytic::{analytic_field, AccelerationBump, AnalyticField};
pub use checkpoint::Checkpoint;
pub use mlp::{MlpArchitecture, MlpField, MlpParams};
pub use train::{fm_loss, gradient_check, train, FmBatch, TrainConfig, TrainOutcome, TrainReport};
