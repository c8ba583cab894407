//! Dense tensors, convolution kernels and a small reverse-mode tape.

pub mod conv;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use conv::{conv2d, ConvGeometry};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape4, Tensor4};
