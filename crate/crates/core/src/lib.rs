//! Closed-loop blood-glucose control with a learned circadian disturbance.
//!
//! The pieces, in loop order: [`plant`] simulates the patient and the CGM,
//! [`estimator`] filters the CGM into a state estimate, [`distlearn`] turns
//! consecutive estimates into samples of the insulin-sensitivity disturbance,
//! [`gp`] regresses those samples over time of day, and [`mpc`] uses the
//! predicted disturbance over its horizon. [`harness`] wires the loop and
//! scores the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distlearn;
pub mod error;
pub mod estimator;
pub mod gp;
pub mod harness;
pub mod linmodel;
pub mod mpc;
pub mod plant;

pub use error::{Error, Result};
