//! Output regulation for linear plants whose error is measured at the
//! arrival times of a Poisson process.
//!
//! The pipeline: check the standing assumptions on plant and exosystem,
//! build an internal model and an observer-based stabilizer, synthesize the
//! hybrid observer gains from an LMI, then confirm mean-exponential
//! stability by Monte Carlo simulation of the closed-loop jump process.

pub mod config;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod lmi;
pub mod model;
pub mod pdmp;
pub mod pipeline;
pub mod synthesis;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
