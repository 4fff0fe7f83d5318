//! Flow-matching sampling laboratory: sharpness-calibrated Euler schedules,
//! a small trainable velocity model, distribution metrics and risk oracles.

pub mod calibration;
pub mod datasets;
pub mod error;
pub mod field;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod theory;
pub mod tinyflow;

pub use error::{Error, Result};
pub use field::{ClosedFormFlow, Convention, FieldKind, VelocityField};
pub use grid::Grid;
