//! Desk-scale score distillation against exact Gaussian-mixture diffusion models.

pub mod bench;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod ode;
pub mod oracle;
pub mod rng;
pub mod scene;
pub mod schedule;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
