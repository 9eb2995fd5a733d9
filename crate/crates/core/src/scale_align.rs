//! Moving feature maps between pyramid levels.
//!
//! Upsampling aligns channels with a 1x1 conv at the source resolution and
//! then performs a single bilinear resize by the full factor. Downsampling is
//! a `factor x factor` convolution with stride `factor` and no padding.

use std::fmt;

use crate::blocks::ConvBlock;
use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::ConvSpec;
use crate::param::{Initializer, ParamStore};
use crate::tensor::Real;

/// Direction and factor of a level change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleKind {
    Identity,
    Upsample(usize),
    Downsample(usize),
}

impl ResampleKind {
    /// Kind needed to carry level `from` to level `to` (higher level = coarser).
    pub fn between(from: u8, to: u8) -> Self {
        use std::cmp::Ordering::*;
        match from.cmp(&to) {
            Equal => ResampleKind::Identity,
            Greater => ResampleKind::Upsample(1 << (from - to)),
            Less => ResampleKind::Downsample(1 << (to - from)),
        }
    }

    pub fn factor(self) -> usize {
        match self {
            ResampleKind::Identity => 1,
            ResampleKind::Upsample(f) | ResampleKind::Downsample(f) => f,
        }
    }
}

impl fmt::Display for ResampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResampleKind::Identity => write!(f, "identity"),
            ResampleKind::Upsample(k) => write!(f, "up x{k}"),
            ResampleKind::Downsample(k) => write!(f, "down x{k}"),
        }
    }
}

/// Checks that `factor` is a legal resampling factor for a pyramid of `num_levels` inputs.
pub fn check_factor(factor: usize, num_levels: usize) -> Result<()> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(config_err!("resampling factor must be 2, 4 or 8, got {factor}"));
    }
    if factor == 8 && num_levels < 4 {
        return Err(config_err!("factor 8 resampling requires a 4-level pyramid, this one has {num_levels} levels"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct ResamplePolicy {
    /// Add norm and ReLU after resampling convolutions.
    pub norm_act: bool,
    pub align_corners: bool,
}

#[derive(Clone, Debug)]
pub struct Resampler {
    pub kind: ResampleKind,
    /// Channel-align 1x1 conv for upsampling, strided conv for downsampling.
    pub conv: Option<ConvBlock>,
    pub align_corners: bool,
}

impl Resampler {
    pub fn identity() -> Self {
        Resampler { kind: ResampleKind::Identity, conv: None, align_corners: false }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        kind: ResampleKind,
        c_in: usize,
        c_out: usize,
        num_levels: usize,
        policy: ResamplePolicy,
    ) -> Result<Self> {
        let spec = match kind {
            ResampleKind::Identity => {
                if c_in != c_out {
                    return Err(config_err!("identity resampler cannot change channels {c_in} -> {c_out}"));
                }
                return Ok(Self::identity());
            }
            ResampleKind::Upsample(f) => {
                check_factor(f, num_levels)?;
                ConvSpec::pointwise(c_in, c_out)
            }
            ResampleKind::Downsample(f) => {
                check_factor(f, num_levels)?;
                ConvSpec::new(c_in, c_out, f, f, 0)
            }
        };
        let conv = ConvBlock::new(store, init, name, spec, policy.norm_act, policy.norm_act)?;
        Ok(Resampler { kind, conv: Some(conv), align_corners: policy.align_corners })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        match self.kind {
            ResampleKind::Identity => Ok(x),
            ResampleKind::Upsample(f) => upsample(g, store, x, f, self.conv.as_ref(), self.align_corners),
            ResampleKind::Downsample(_) => {
                let conv = self.conv.as_ref().expect("downsampler has a conv");
                downsample(g, store, x, conv)
            }
        }
    }
}

/// Optional 1x1 channel alignment, then one bilinear resize to `factor` times the size.
pub fn upsample<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    factor: usize,
    channel_align: Option<&ConvBlock>,
    align_corners: bool,
) -> Result<NodeId> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(config_err!("upsampling factor must be 2, 4 or 8, got {factor}"));
    }
    let aligned = match channel_align {
        Some(conv) => conv.forward(g, store, x)?,
        None => x,
    };
    let s = g.shape(aligned);
    g.bilinear_resize(aligned, s.h * factor, s.w * factor, align_corners)
}

/// Strided `factor x factor` convolution; spatial dims must divide exactly.
pub fn downsample<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, conv: &ConvBlock) -> Result<NodeId> {
    let spec = conv.spec();
    let s = g.shape(x);
    if spec.kernel != spec.stride || spec.padding != 0 {
        return Err(config_err!("downsampling conv must have kernel == stride and no padding"));
    }
    let f = spec.stride;
    if !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
        return Err(shape_err!(
            "downsample x{f} needs spatial dims divisible by {f}, got {}x{}",
            s.h,
            s.w
        ));
    }
    conv.forward(g, store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    const POLICY: ResamplePolicy = ResamplePolicy { norm_act: false, align_corners: false };

    #[test]
    fn kind_between_levels() {
        assert_eq!(ResampleKind::between(3, 2), ResampleKind::Upsample(2));
        assert_eq!(ResampleKind::between(5, 2), ResampleKind::Upsample(8));
        assert_eq!(ResampleKind::between(2, 4), ResampleKind::Downsample(4));
        assert_eq!(ResampleKind::between(4, 4), ResampleKind::Identity);
    }

    #[test]
    fn factor_eight_needs_four_levels() {
        assert!(check_factor(8, 4).is_ok());
        assert!(check_factor(8, 3).is_err());
        assert!(check_factor(3, 4).is_err());
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(0);
        assert!(Resampler::new(&mut store, &mut init, "r", ResampleKind::Upsample(8), 4, 4, 3, POLICY).is_err());
    }

    #[test]
    fn upsample_shapes() {
        let mut store = ParamStore::<f32>::new();
        let r = Resampler::new(&mut store, &mut Initializer::new(0), "up", ResampleKind::Upsample(2), 64, 32, 4, POLICY)
            .unwrap();
        let mut g = Graph::shape_only();
        let x = g.placeholder(Shape::new(1, 64, 20, 20)).unwrap();
        let y = r.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 32, 40, 40));
    }

    #[test]
    fn downsample_shapes_and_divisibility() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(0);
        let d2 = Resampler::new(&mut store, &mut init, "d2", ResampleKind::Downsample(2), 32, 64, 4, POLICY).unwrap();
        let d8 = Resampler::new(&mut store, &mut init, "d8", ResampleKind::Downsample(8), 32, 256, 4, POLICY).unwrap();
        let mut g = Graph::shape_only();
        let x = g.placeholder(Shape::new(1, 32, 160, 160)).unwrap();
        let y2 = d2.forward(&mut g, &store, x).unwrap();
        let y8 = d8.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y2), Shape::new(1, 64, 80, 80));
        assert_eq!(g.shape(y8), Shape::new(1, 256, 20, 20));
        let odd = g.placeholder(Shape::new(1, 32, 20, 12)).unwrap();
        let err = d8.forward(&mut g, &store, odd).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
        // 32 * 64 * 2 * 2 + 64 and 32 * 256 * 8 * 8 + 256
        assert_eq!(store.numel(), 8256 + 524544);
    }

    #[test]
    fn single_channel_kernel_sum() {
        let mut store = ParamStore::<f64>::new();
        let d = Resampler::new(&mut store, &mut Initializer::new(0), "d", ResampleKind::Downsample(2), 1, 1, 4, POLICY)
            .unwrap();
        let conv = d.conv.as_ref().unwrap();
        store.get_mut(conv.conv.weight).value = Tensor::ones(Shape::new(1, 1, 2, 2));
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(Shape::new(1, 1, 4, 4)), false).unwrap();
        let y = d.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn identity_channel_align_keeps_constant() {
        let mut store = ParamStore::<f64>::new();
        let r = Resampler::new(&mut store, &mut Initializer::new(0), "up", ResampleKind::Upsample(4), 3, 3, 4, POLICY)
            .unwrap();
        let conv = &r.conv.as_ref().unwrap().conv;
        store.get_mut(conv.weight).value = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| f64::from(o == i));
        let mut g = Graph::new();
        let x = g.input(Tensor::full(Shape::new(1, 3, 2, 3), 1.75), false).unwrap();
        let y = r.forward(&mut g, &store, x).unwrap();
        let v = g.value(y).unwrap();
        assert_eq!(v.shape(), Shape::new(1, 3, 8, 12));
        assert!(v.data().iter().all(|&e| e == 1.75));
    }
}
