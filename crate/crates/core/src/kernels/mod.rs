//! Tensors and the numeric kernels the model is built from.
//!
//! Every kernel loops in a fixed order so results are bit-reproducible for a
//! given input and precision. Matrices are row-major and weights are stored
//! `in × out`, so a projection is always `x · W`.

mod ops;
mod scalar;
mod tensor;

pub use ops::{
    matmul, matmul_nt, matmul_tn, relu, rms_norm, rms_norm_row, rope_apply, rope_rotate_row,
    silu, silu_grad, sigmoid, softmax_in_place, softmax_rows,
};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
