//! Dense tensors, convolution and the deterministic generator everything
//! else is built on.

mod conv;
mod rng;
mod tensor;

pub use conv::{conv2d, conv2d_backward};
pub use rng::{gaussian, Rng};
pub use tensor::Tensor;
pub(crate) use tensor::checked_numel;
