//! Source attribution classifiers over precomputed audio-encoder embeddings.
//!
//! The crate provides a small reverse-mode tensor engine ([`graph`]), the
//! single-view `fcn`/`cnn` classifiers and the two-view `concat`/`coffe`
//! fusion networks ([`models`]), a Chernoff-distance alignment loss
//! ([`losses`]), Adam training with early stopping ([`train`]), evaluation
//! metrics including averaged one-vs-all EER ([`metrics`]) and the `EMB1` /
//! `CFM1` binary containers ([`data`], [`models`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, the precision used for training and evaluation.

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use io::write_atomic;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type ModelParams = models::ModelParams<f64>;
pub type AdamState = train::AdamState<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type ModelParams32 = models::ModelParams<f32>;
