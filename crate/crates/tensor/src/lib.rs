//! Small `f64` tensor library with tape-based reverse-mode autodiff,
//! the layers needed for convolutional generators and policies, Adam, and
//! a compact checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use layers::{scoped, BatchNorm, Conv2d, ConvTranspose2d, Dense, Module, RunningStats};
pub use optim::{Adam, AdamConfig, AdamState};
pub use tape::{sigmoid, softmax_in_place, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
