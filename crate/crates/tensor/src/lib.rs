//! Rank-4 NCHW tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Tensors are immutable `f32` arrays in row-major NCHW order. Ops are pure
//! functions; when an input is attached to a [`GradTape`], the op records a
//! backward rule and the output is attached to the same tape. Every op
//! rejects non-finite results so NaN/Inf cannot propagate silently.

mod conv;
mod error;
mod ops;
mod tape;
mod tensor;

pub use conv::conv2d;
pub use error::{Result, TensorError};
pub use ops::{
    add, batch_slice, div_scalar, l1_diff, l2_diff, l2_norm, mean, pixel_shuffle, relu,
    scalar_mul, std_dev,
};
pub use tape::{apply_custom, CustomOp, GradTape, Gradients};
pub use tensor::{Shape, Tensor};
