//! Minimal reverse-mode differentiation over a fixed operation set.
//!
//! The graph the adaptation loop needs is static (plugin, frozen fusion,
//! frozen head, distillation losses), so the tape only knows the handful of
//! operations those stages use. Everything is `f64`.

mod kernels;
mod tape;
mod tensor;

pub(crate) use kernels::{gemm, gemm_nt};
pub use kernels::{log_sigmoid, sigmoid, softplus};
pub use tape::{smooth_l1, Gradients, Tape, Var};
pub use tensor::Tensor;
