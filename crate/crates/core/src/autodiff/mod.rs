//! Dense `f64` tensors, a reverse-mode tape, and mask-aware momentum SGD.

mod params;
mod tape;
mod tensor;

pub use params::{ParameterStore, Sgd, TrainableMask};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
