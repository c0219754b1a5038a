//! Neural-network operators and the named blocks of the segmentation network.

pub mod activation;
pub mod conv;
pub mod layers;
pub mod norm;
pub mod pool;

pub use activation::{relu, sigmoid_op, softmax, softmax_channels};
pub use conv::{conv2d, conv_out_size};
pub use layers::{Bottleneck, C2psa, C3k2, ChannelAttention, Conv, ConvGnRelu, GroupNorm, SelfAttention, Sppf};
pub use norm::{group_norm, groups_for, GN_EPS};
pub use pool::{global_avg_pool, max_pool2d, scale_channels, upsample_nearest};
