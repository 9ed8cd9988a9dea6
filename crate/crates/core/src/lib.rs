//! Reversible transformer training engine.
//!
//! Backward passes rebuild each block's inputs from its outputs instead of
//! caching activations. The crate provides the tensor kernels, the reversible
//! engine, Rev-ViT and Rev-MViT models, analytic cost accounting and the
//! training, verification and benchmark harness behind the `revformer` CLI.

pub mod analytics;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod meter;
pub mod model;
pub mod mvit;
pub mod nn;
pub mod optim;
pub mod rev;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vit;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
