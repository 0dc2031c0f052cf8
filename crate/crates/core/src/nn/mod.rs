//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations the lifetime model needs are provided: stride-1
//! unpadded 2D convolution, non-overlapping average pooling, ReLU, dense
//! layers, flatten, and mean squared error.

mod gemm;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{glorot_uniform, Tensor};
