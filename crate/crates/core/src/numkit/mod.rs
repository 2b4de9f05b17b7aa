//! Dense tensors, reverse-mode autodiff, Adam and gradient clipping.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, clip_global_norm, AdamState};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::row_sum_squares;
