//! Dense tensors, reverse-mode autodiff, Adam, and low-rank adapters.

pub mod kernels;
mod lora;
mod optim;
mod tape;
mod tensor;

pub use lora::LowRankAdapter;
pub use optim::{clip_grad_norm, AdamConfig, OptimizerState};
pub use tape::{Gradients, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
