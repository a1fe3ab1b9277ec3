//! Dense tensors, reverse-mode differentiation and seeded randomness.

mod real;
mod rng;
pub mod tape;
mod tensor;

pub use real::Real;
pub use rng::Rng;
pub use tape::{grad_check, Tape, Var};
pub use tensor::{gelu, layer_norm, matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};
