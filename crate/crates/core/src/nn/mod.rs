//! Differentiable neural operators, each a forward kernel plus a backward
//! rule recorded on the [`Graph`](crate::Graph).
//!
//! All operators are methods on [`Var`](crate::Var) so model code reads as
//! a chain: `x.conv2d(w, Some(b), 1, 1)?.batch_norm2d(..)?.relu()?`.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod resample;

pub use conv::conv_output_extent;
pub use norm::{BatchNormMode, BatchNormStats, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use resample::UpsampleMode;
