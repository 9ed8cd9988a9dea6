//! Differentiable kernels. Each forward has an explicit vector-Jacobian
//! product; there is no tape or graph.

mod activation;
mod attention;
mod elementwise;
mod linear;
mod loss;
mod matmul;
mod norm;
mod pool;
mod softmax;

pub use activation::{gelu, gelu_vjp};
pub use attention::{multi_head_attention, multi_head_attention_vjp};
pub use elementwise::{
    add, add_broadcast, add_broadcast_vjp, add_vjp, concat, maximum, maximum_vjp, mean_pool,
    mean_pool_vjp, scale, scale_vjp, split, sub,
};
pub use linear::{linear, linear_vjp, LinearGrads};
pub use loss::softmax_cross_entropy;
pub use matmul::{matmul, matmul_vjp};
pub use norm::{layer_norm, layer_norm_vjp, layer_norm_with_stats, LayerNormStats};
pub use pool::{
    depthwise_conv_pool, depthwise_conv_pool_vjp, im2col, im2col_vjp, Grid, PatchGeometry,
};
pub use softmax::{softmax, softmax_vjp};
