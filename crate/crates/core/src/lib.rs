//! Temporal-frequency online handwriting verification.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and the tests use.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod matrix;
pub mod network;
pub mod scalar;
pub mod signal;
pub mod spectral;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type RawTrace64 = signal::RawTrace<f64>;
pub type FeatureSequence64 = signal::FeatureSequence<f64>;
pub type ModelParams64 = network::ModelParams<f64>;
pub type Embeddings64 = network::Embeddings<f64>;
pub type TrainSet64 = training::TrainSet<f64>;
pub type WriterData64 = training::WriterData<f64>;
pub type Dataset64 = data_io::Dataset<f64>;
pub type Tape64 = autodiff::Tape<f64>;
