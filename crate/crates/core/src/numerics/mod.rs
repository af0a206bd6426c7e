//! Tensor engine: dense arrays, a reverse-mode tape and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
