//! Generalized Krasnoselskii-Mann operators and bilevel meta optimization.
//!
//! The lower level drives a state `u` toward a fixed point of an averaged,
//! parameterized operator `T(·, ω) = (1 − α)I + αD(·, ω)` while a gradient step
//! on the upper-level loss selects among fixed points. The upper level trains
//! `ω` by differentiating through the unrolled inner iterations.

pub mod bmo;
pub mod error;
pub mod hypergrad;
pub mod metric;
pub mod operators;
pub mod params;
pub mod tasks;

pub use bmo::{BmoConfig, Sample, TrainReport};
pub use error::{Error, Result};
pub use hypergrad::LossDescriptor;
pub use metric::{Matrix, MetricMatrix, Vector};
pub use params::HyperParams;
