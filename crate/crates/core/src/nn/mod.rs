//! A small convolutional network stack in `f64`: tensors, layer passes,
//! momentum SGD with a step schedule, checkpoints and gradient checking.

pub mod checkpoint;
mod gradcheck;
pub mod layers;
mod model;
mod optim;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_on, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use layers::{
    conv3x3_backward, conv3x3_forward, dense_backward, dense_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, softmax_xent,
};
pub use model::{ActShape, Cache, LayerSpec, Model, ModelSpec, NUM_CLASSES};
pub use optim::{lr_schedule, sgd_momentum_step, TrainConfig};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}
