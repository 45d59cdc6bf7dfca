//! Differentiable computation substrate shared by every learnable module.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{softmax, softmax_backward, Conv1d, ConvBlock, ConvStack, Linear};
pub use lstm::Lstm;
pub use optim::{noam_lr, AdamConfig, OptimizerState};
pub use tensor::{HasParams, Matrix, Parameter, Real};
