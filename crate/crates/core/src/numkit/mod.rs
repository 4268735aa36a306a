//! Dense `f64` kernels: tensors, matrix products, row softmax, convolution,
//! bilinear resampling and group normalization.

mod conv;
pub mod layers;
mod linalg;
mod norm;
mod resize;
mod tensor;

pub use conv::{conv2d, conv2d_backward, conv2d_with};
pub use linalg::{dot, matmul, matmul_nt, matmul_with, sigmoid, softmax_rows};
pub(crate) use linalg::{gemm, gemm_tn, softmax_in_place, softmax_rows_backward};
pub use norm::group_norm;
pub use resize::{
    bilinear_upsample2x, bilinear_upsample2x_adjoint, resize_bilinear, resize_bilinear_adjoint,
    sample_bilinear, sample_bilinear_backward,
};
pub use tensor::{Matrix, Tensor};
