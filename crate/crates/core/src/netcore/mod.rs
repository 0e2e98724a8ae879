//! Differentiable primitives and parameter bookkeeping.

pub mod ops;
mod params;
mod tape;

pub use params::{he_normal, ParamCollection, Parameter};
pub use tape::{backward, Gradients, Tape, Var};

/// Negative slope of the leaky ReLU used by the critic.
pub const LEAKY_SLOPE: f64 = 0.2;
