//! Dense f64 tensors, a reverse-mode autodiff tape, the VGG-style layer set
//! (3x3 conv, ReLU, 2x2 max-pool, linear) and momentum SGD.

pub mod checkpoint;
pub mod kernels;
pub mod ops;
mod params;
mod sgd;
mod tape;
mod tensor;

pub use params::{he_uniform, ParamId, ParamStore};
pub use sgd::{Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
