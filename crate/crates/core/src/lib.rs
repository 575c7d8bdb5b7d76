//! Lion and Cautious Lion (CLion) optimizers, their baselines, and the
//! measurement tools around them: a twin-trajectory stability probe,
//! on-trajectory inequality checks, and a deterministic experiment harness.
//!
//! The vector and optimizer layers are generic over the element type
//! ([`Scalar`], implemented for `f32` and `f64`). Everything above them
//! (problems, stability, diagnostics, harness) works in `f64`; the aliases
//! below name the `f64` instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod harness;
pub mod optim;
pub mod output;
pub mod problems;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod stability;
pub mod vecmath;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamVector = vecmath::Vector<f64>;
pub type ParamVector32 = vecmath::Vector<f32>;
pub type OptimizerConfig = optim::OptimizerConfig<f64>;
pub type OptimizerState = optim::OptimizerState<f64>;
pub type UpdateDirection = optim::UpdateDirection<f64>;
pub type Step = optim::Step<f64>;
