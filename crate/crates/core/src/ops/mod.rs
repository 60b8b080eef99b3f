//! Forward and backward kernels for the layers the model zoo needs.
//!
//! Layer structs (`Conv2d`, `BatchNorm2d`, ...) hold the cache of one forward
//! pass; calling `backward` without a preceding `forward` is a usage error.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, Relu};
pub use batchnorm::{BatchNorm2d, BatchNormGrads, RunningUpdate, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d_forward, conv_out_len, Conv2d, Conv2dGrads};
pub use linear::{linear_forward, Linear, LinearGrads};
pub use loss::softmax_cross_entropy;
pub use pool::{GlobalAvgPool, MaxPool2x2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
