//! Minimal trainable-network substrate: tensors, layers with hand-written
//! backward passes, Adam, finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use params::{Adam, ParamId, ParameterSet};
pub use tensor::Tensor;
