//! A small deterministic f64 tensor and backprop engine.
//!
//! Networks are plain layer stacks with hand-written backward passes. All
//! math is single-threaded and seeded, so identical inputs give
//! bit-identical outputs.

mod im2col;
pub mod layer;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layer::{sigmoid, LayerSpec, Mode};
pub use network::{Architecture, Gradients, Network, Trace};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
