//! Federated continual learning with asynchronous per-client task streams,
//! prototype-augmented losses and fractal pretraining.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod client;
pub mod data;
pub mod error;
pub mod eval;
pub mod fractal;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod pretrain;
pub mod rng;
pub mod server;
pub mod splitgen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
