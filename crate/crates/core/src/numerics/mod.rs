//! Dense tensors, a reverse-mode tape, neural layers, optimizers and
//! gradient checking.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_filtered, grad_check_inputs, GradCheckReport};
pub use graph::{bce_sum, sigmoid, Backward, Graph, Var, PROB_FLOOR};
pub use optim::{noam_lr, Adam, AdamConfig, Schedule};
pub use params::{Gradients, Init, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::{matmul, Tensor};
