//! Difference-vector equalization for robust fine-tuning of two-tower
//! encoders, with the baselines, geometry metrics and a synthetic benchmark.

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod numeric;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
