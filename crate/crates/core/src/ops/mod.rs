//! Layer vocabulary: dilated convolution, batch normalization, max pooling
//! and transposed-convolution upsampling, each with a hand-derived backward
//! pass.

pub mod batchnorm;
pub mod conv;
pub mod deconv;
pub mod pool;

pub use batchnorm::{batch_norm, BatchNorm, BnCache, BnMode, BnStats, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvKernel, ConvSpec};
pub use deconv::{bilinear_kernel, deconv_backward, deconv_kernel_side, deconv_padding, deconv_upsample};
pub use pool::{max_pool, max_pool_backward, pool_out_size, PoolOutput};

use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Rectifier, elementwise.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through the rectifier: passes gradient where the forward input
/// was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, upstream: &Tensor4<T>) -> Tensor4<T> {
    let mut grad = upstream.clone();
    for (g, &v) in grad.data_mut().iter_mut().zip(input.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}
