//! Minimal reverse-mode differentiation: tensors, a recording tape,
//! parameter stores and first-order optimizers. All arithmetic is `f64`.

mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{OptimizerKind, OptimizerState};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
