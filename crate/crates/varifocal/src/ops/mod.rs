//! Differentiable operations.
//!
//! Each submodule provides the raw tensor kernels plus the corresponding
//! [`Graph`](crate::graph::Graph) methods that record a backward closure.

pub mod basic;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;

pub use basic::softmax;
pub use conv::conv2d;
pub use linear::fully_connected;
pub use loss::Reduction;
pub use norm::BnMode;
pub use pool::max_pool2d;
pub use resize::bilinear_resize;
