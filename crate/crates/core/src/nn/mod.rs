//! Neural building blocks: convolutions, pooling, activations, norms, linear maps.

mod act;
mod conv;
mod linear;
mod norm;
mod pool;

pub use act::{log_softmax_axis0, sigmoid, softmax, LEAKY_SLOPE};
pub use conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, Conv2d};
pub use linear::{linear, Linear};
pub use norm::{instance_norm, layer_norm, Norm, NORM_EPS};
pub use pool::{channel_pool, gap, maxpool2, upsample_nearest2, PoolMode};
