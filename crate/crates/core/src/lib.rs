//! Sparse top-k generator networks trained by alternating back-propagation.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod data;
pub mod dissect;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod netcore;
pub mod optim;
pub mod rng;
pub mod sparsity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
