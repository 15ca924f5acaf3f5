//! Minimal NHWC tensor engine: the handful of layers a small convolutional
//! GAN needs, a reverse-mode tape over them, and the Adam/RMSProp optimizers.
//!
//! Storage is generic over [`Element`] so that the same graph code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use conv::ConvGeometry;
pub use error::{AutodiffError, Result};
pub use graph::{
    Gradients, Graph, Mode, RunningStats, Var, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};
pub use optim::{Optimizer, OptimizerKind, Update};
pub use tensor::{Element, Tensor};
