//! Minimal numeric substrate: convolution, batch norm, activations, pooling,
//! fully-connected layers, losses and SGD, each with an explicit backward pass.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod optim;
pub mod pool;

pub use activation::{activation, activation_backward, sigmoid, Activation};
pub use batchnorm::{
    apply_affine, batchnorm_backward, batchnorm_forward, normalize, BatchNormState, BnContext, RunningStats, BN_EPS,
    BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, conv2d_reference, ConvSpec};
pub use linear::{linear_backward, linear_forward};
pub use loss::{argmax_rows, cross_entropy, log_softmax, softmax};
pub use optim::{sgd_step, sgd_update, Param};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool_backward, maxpool_forward};
