//! Instance-specific, model-adaptive supervision for semi-supervised semantic
//! segmentation, built on a small from-scratch autodiff engine.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod hardness;
pub mod loss;
pub mod maps;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
