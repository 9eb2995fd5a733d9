//! Raw tensor kernels used by the graph ops.

pub mod conv;
pub mod resize;
