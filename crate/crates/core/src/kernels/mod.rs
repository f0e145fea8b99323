//! Forward and backward passes of the layer primitives.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::{
    cross_entropy_from_probs, cross_entropy_loss, relu_backward, relu_forward, softmax_backward, softmax_channelwise,
    softmax_cross_entropy,
};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_par, ConvGeometry, LayerGrads};
pub use norm::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, batchnorm_train, BatchNormCache, BatchNormGrads, BnMode,
    RunningStats, BN_EPS, BN_MOMENTUM,
};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, maxunpool2x2, maxunpool2x2_backward, PoolIndices};
