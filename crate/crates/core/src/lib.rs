//! Wheel-slip control laboratory for a single-corner braking model.
//!
//! * [`friction`]: Burckhardt friction law and surface presets.
//! * [`plant`]: wheel/vehicle dynamics and the brake actuator.
//! * [`analysis`]: equilibria, linearization and proportional-gain bound.
//! * [`controllers`]: relay-tuned PID and the adaptive barrier law.
//! * [`fuzzy`]: road-condition weights and blending of parallel controllers.
//! * [`scenario`]: declarative closed-loop experiments, traces and metrics.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod controllers;
pub mod error;
pub mod friction;
pub mod fuzzy;
pub mod plant;
pub mod scenario;

pub use error::{Error, Result};
