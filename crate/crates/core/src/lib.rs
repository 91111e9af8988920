//! TransClaw U-Net: a hybrid convolutional/transformer encoder with a
//! bottom-upsampling path and claw-style multi-source skip connections.
//!
//! The crate carries everything needed to train and evaluate the network on
//! a CPU: a reverse-mode autodiff tensor engine ([`tensor`]), differentiable
//! neural operators ([`nn`]), the architecture ([`model`]), SGD training and
//! checkpoints ([`train`]), segmentation metrics ([`metrics`]), a synthetic
//! phantom dataset ([`data`]), the ablation harness ([`ablation`]) and the
//! finite-difference gradient suite ([`verify`]).
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default). Parallel and sequential builds produce bit-identical
//! results: work is only ever split over disjoint output rows.

pub mod ablation;
pub mod data;
mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
mod scalar;
pub mod tensor;
pub mod verify;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};
