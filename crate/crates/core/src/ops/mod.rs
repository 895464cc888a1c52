//! Tape-free numeric kernels.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod merge;

pub use activation::{normal_cdf, Activation, DEFAULT_LEAKY_SLOPE};
pub use conv::{
    conv3d, conv3d_grad_input, conv3d_grad_kernel, conv_transpose3d, conv_transpose3d_shape,
    Conv3dGeometry,
};
pub use linear::{add_bias, bias_grad, linear_along, linear_grad_input, linear_grad_weight};
pub use merge::{spectral_merge, spectral_merge_backward, Direction};
