//! Circuit extraction and reuse analysis for small, component-decomposed
//! transformers.
//!
//! The crate trains a toy decoder-only transformer on four synthetic tasks,
//! scores every attention head and MLP per example with edge attribution
//! patching, and measures how consistently (and how causally) the same
//! components are used within and across tasks.
//!
//! Core math is generic over [`numeric::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which every oracle tolerance in the
//! test-suite assumes.

pub mod analysis;
pub mod attribution;
pub mod error;
pub mod intervention;
pub mod model;
pub mod numeric;
pub mod tasks;

pub use error::{Error, Result};

pub type Tensor = numeric::Tensor<f64>;
pub type Tape = numeric::Tape<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type Model = model::Model<f64>;
pub type Weights = model::Weights<f64>;
