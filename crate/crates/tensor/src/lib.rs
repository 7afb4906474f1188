//! Deterministic `f64` tensors with a reverse-mode tape.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, projection_weights, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use rng::Rng;
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
