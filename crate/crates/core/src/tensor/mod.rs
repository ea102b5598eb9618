//! Dense numerics substrate: matrices, counted kernels, and reverse-mode
//! gradients for every kernel the model uses.

mod flops;
pub mod gradcheck;
mod matrix;
pub mod ops;
mod tape;

pub use flops::{FlopCounter, Flops};
pub use matrix::Matrix;
pub use ops::{causal_mask, concat_rows, layer_norm, matmul, softmax_rows, MASKED};
pub use tape::{GradTape, Gradients, Var};
