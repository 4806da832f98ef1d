//! Adversarial attacks on time series classifiers through gradient
//! adversarial transformation networks, with knowledge distillation for
//! non-differentiable or black-box targets.

pub mod attack;
pub mod data;
pub mod distill;
pub mod dtw;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
