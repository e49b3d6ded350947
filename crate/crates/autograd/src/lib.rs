//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! Just enough machinery to train convolutional encoder-decoder generators and
//! patch discriminators on a CPU: strided and transposed convolutions backed by
//! GEMM, instance normalization, pointwise activations, channel concatenation,
//! per-channel noise injection, the usual losses, and Adam.
//!
//! Graphs are built eagerly and owned by reference-counted [`Var`] handles; a
//! graph lives on one thread. Everything is generic over `f32`/`f64` so the
//! same model code can be gradient-checked in double precision.

mod float;
pub mod ops;
mod optim;
mod tensor;
mod var;

pub use float::Float;
pub use ops::conv::{conv2d_forward, conv_out_size, conv_transpose2d_forward, conv_transpose_out_size};
pub use optim::Adam;
pub use tensor::Tensor;
pub use var::{grad_enabled, no_grad, NoGradGuard, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    Length { shape: Vec<usize>, len: usize },
}
