//! Asymptotic feature pyramid necks on a small tape-based autodiff core.
//!
//! [`necks::build`] turns a [`NeckConfig`] into a [`NeckModel`]; forward
//! passes take and return a [`FeaturePyramid`]. [`analysis`] counts
//! parameters and FLOPs from a shape-only trace, and [`gradcheck`] compares
//! analytic gradients with central differences.

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod necks;
pub mod param;
pub mod scale_align;
pub mod tensor;
pub mod tsr;

pub use error::{Error, Result};
pub use exec::Execution;
pub use fusion::{FusionKind, FusionWeights};
pub use graph::{Graph, NodeId, OpKind};
pub use necks::{FeaturePyramid, NeckConfig, NeckModel, Variant};
pub use param::{Initializer, ParamStore};
pub use tensor::{DType, Real, Shape, Tensor};
