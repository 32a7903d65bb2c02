//! Dense tensors, a reverse-mode autodiff tape and seeded randomness.

pub mod gradcheck;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use rng::{Rng, SeedTree};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
