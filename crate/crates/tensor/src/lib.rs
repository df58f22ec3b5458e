//! Minimal dense tensors with reverse-mode differentiation for the operators
//! the point-cloud tracker needs: matrix products, row softmax, layer norm,
//! max pooling, row gather/scatter, channels-last 2-D convolutions and a few
//! shape manipulations. Every operator has a hand-written gradient.

mod error;
mod real;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{sigmoid, ConvGeom, Graph, Var};
pub use optim::{step_decay_lr, AdamState};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tensor::Tensor;
