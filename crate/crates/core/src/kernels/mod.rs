//! Integer-only tensor kernels on [`FxpTensor`](crate::numfmt::FxpTensor)s.

mod acc;
pub mod add;
mod align;
pub mod conv;
pub mod gemm;
pub mod norm;
pub mod pool;
pub mod relu;
pub mod rsqrt;

pub use acc::AccTensor;
pub use add::fxp_add;
pub use conv::{fxp_conv2d, fxp_conv2d_backward_input, fxp_conv2d_backward_weight, fxp_conv2d_cols, im2col, ConvGeometry};
pub use gemm::{fxp_gemm, fxp_gemm_nt, fxp_gemm_tiled, max_inner_dim};
pub use norm::{
    fxp_batchnorm_backward, fxp_batchnorm_eval, fxp_batchnorm_forward, fxp_layernorm_backward, fxp_layernorm_forward,
    BatchNormParams, LayerNormParams, NormCache, NormLayout, NormStats,
};
pub use pool::{fxp_avgpool, fxp_avgpool_backward, fxp_maxpool, fxp_maxpool_backward};
pub use relu::{fxp_relu, fxp_relu_backward};
pub use rsqrt::fxp_rsqrt;
