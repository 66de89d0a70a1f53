//! Diffusion LMS for node-specific parameter estimation.
//!
//! Nodes of a network estimate overlapping mixtures of global, common
//! (cluster-wide) and local parameter blocks. The crate provides the
//! CTA/ATC diffusion algorithms and baselines, the closed-form mean and
//! mean-square steady-state analysis, and a seeded Monte Carlo harness that
//! compares the two.

pub mod algorithms;
pub mod blockmat;
pub mod combiners;
pub mod error;
pub mod harness;
pub mod scenario;
pub mod theory;

pub use error::{Error, Result};
