//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use optim::Adam;
pub use param::{read_checkpoint, write_checkpoint, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, MASK_LARGE};
pub use tensor::{broadcast_shape, Tensor};
