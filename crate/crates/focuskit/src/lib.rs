//! Volume-level diagnostic toolkit: synthetic cohorts, a small autodiff
//! kernel, adaptive slice aggregation, staged classifiers, and the
//! three-stage screening pipeline built from them.

pub mod aggregate;
pub mod datamodel;
pub mod diffkernel;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod rng;
pub mod stages;
pub mod synthgen;

pub use error::{FocusError, Result};
