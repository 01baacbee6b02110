//! Cone-beam CT reconstruction with a hash-encoded neural attenuation field,
//! plus synthetic phantoms, analytic and iterative baselines, and metrics.

pub mod baselines;
pub mod config;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod raycast;
pub mod real;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
