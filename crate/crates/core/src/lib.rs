//! Differentiable, FLOPs-constrained architecture search over zero-mask pruned,
//! gate-augmented linear-attention transformers for next-item recommendation.

pub mod autodiff;
pub mod checkpoint;
pub mod compact;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
