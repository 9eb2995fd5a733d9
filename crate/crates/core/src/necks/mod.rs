pub mod afpn;
pub mod config;
pub mod fpn;
pub mod model;
pub mod pyramid;
pub mod train;

pub use config::{NeckConfig, Variant};
pub use model::{build, build_afpn, build_fpn, build_pafpn, make_p6, NamedWeights, NeckGraph, NeckModel, P6Head, SiteTopology, Trace};
pub use pyramid::{input_shapes, stride, FeaturePyramid};
pub use train::{toy_loss, train_toy, train_toy_at, ToyTask};
