//! Minimal reverse-mode autodiff over NCHW `f64` tensors.
//!
//! Provides exactly the operations needed by convolutional inpainting networks:
//! strided/dilated convolution, nearest upsampling, pointwise nonlinearities,
//! channel concatenation and slicing, and an orthonormal 2-D DFT pair used by
//! spectral (Fourier) convolution blocks.

mod graph;
mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{log_sigmoid, sigmoid, Conv2dSpec, Gradients, Graph, Var};
pub use params::{kaiming_normal, Adam, Bound, ParamStore};
pub use tensor::Tensor;
