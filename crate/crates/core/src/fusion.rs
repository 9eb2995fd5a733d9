//! Fusing same-shape maps at one pyramid level.
//!
//! Adaptive spatial fusion predicts one weight map per input: each input is
//! compressed by a 1x1 conv, the results are concatenated, a 1x1 conv maps
//! them to `arity` logits, and a channel softmax turns the logits into
//! per-position simplex weights. The fused map is the per-position convex
//! combination of the inputs, with one scalar weight shared across channels.
//! `sum` and `concat` are the fixed-rule alternatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::ConvBlock;
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv2dLayer, ConvSpec};
use crate::param::{Initializer, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Adaptive,
    Sum,
    Concat,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Adaptive, FusionKind::Sum, FusionKind::Concat];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Adaptive => "adaptive",
            FusionKind::Sum => "sum",
            FusionKind::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(FusionKind::Adaptive),
            "sum" => Ok(FusionKind::Sum),
            "concat" => Ok(FusionKind::Concat),
            other => Err(config_err!("unknown fusion kind `{other}`, expected adaptive, sum or concat")),
        }
    }
}

/// Static description of one fusion site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionOp {
    pub kind: FusionKind,
    pub arity: usize,
    /// Width of each compressed input on the weight path (adaptive only).
    pub compress_channels: usize,
    pub level_channels: usize,
}

impl FusionOp {
    pub fn new(kind: FusionKind, arity: usize, compress_channels: usize, level_channels: usize) -> Result<Self> {
        if !(2..=4).contains(&arity) {
            return Err(config_err!("fusion arity must be 2..=4, got {arity}"));
        }
        if compress_channels == 0 || level_channels == 0 {
            return Err(config_err!("fusion widths must be >= 1"));
        }
        Ok(FusionOp { kind, arity, compress_channels, level_channels })
    }
}

/// Per-position weights, channel `k` weighting input `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T>(pub Tensor<T>);

impl<T: Real> FusionWeights<T> {
    pub fn arity(&self) -> usize {
        self.0.shape().c
    }

    /// Largest deviation of a per-position channel sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let s = self.0.shape();
        let mut worst = 0.0f64;
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let total: f64 = (0..s.c).map(|c| self.0.at(n, c, y, x).as_f64()).sum();
                    worst = worst.max((total - 1.0).abs());
                }
            }
        }
        worst
    }

    pub fn in_unit_interval(&self) -> bool {
        self.0.data().iter().all(|&w| w >= T::zero() && w <= T::one())
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.in_unit_interval() && self.max_sum_error() <= tol
    }
}

#[derive(Clone, Debug)]
pub struct AdaptiveFusion {
    pub op: FusionOp,
    pub compress: Vec<ConvBlock>,
    pub logits: Conv2dLayer,
}

#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub op: FusionOp,
    pub proj: Conv2dLayer,
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Adaptive(AdaptiveFusion),
    Sum(FusionOp),
    Concat(ConcatFusion),
}

/// Graph nodes produced by one fusion site.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: NodeId,
    /// Softmax weight map `(n, arity, h, w)`, adaptive fusion only.
    pub weights: Option<NodeId>,
}

impl Fusion {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        op: FusionOp,
        norm: bool,
    ) -> Result<Self> {
        let c = op.level_channels;
        Ok(match op.kind {
            FusionKind::Adaptive => {
                let compress = (0..op.arity)
                    .map(|k| {
                        let spec = ConvSpec::pointwise(c, op.compress_channels);
                        ConvBlock::new(store, init, &format!("{name}.weight{k}"), spec, norm, true)
                    })
                    .collect::<Result<_>>()?;
                let spec = ConvSpec::pointwise(op.arity * op.compress_channels, op.arity);
                let logits = Conv2dLayer::new(store, init, &format!("{name}.weight_levels"), spec)?;
                Fusion::Adaptive(AdaptiveFusion { op, compress, logits })
            }
            FusionKind::Sum => Fusion::Sum(op),
            FusionKind::Concat => {
                let proj = Conv2dLayer::new(store, init, &format!("{name}.proj"), ConvSpec::pointwise(op.arity * c, c))?;
                Fusion::Concat(ConcatFusion { op, proj })
            }
        })
    }

    pub fn op(&self) -> FusionOp {
        match self {
            Fusion::Adaptive(a) => a.op,
            Fusion::Sum(op) => *op,
            Fusion::Concat(c) => c.op,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &[NodeId]) -> Result<FusionOutput> {
        match self {
            Fusion::Adaptive(a) => {
                let (fused, weights) = adaptive_fuse(g, store, inputs, a)?;
                Ok(FusionOutput { fused, weights: Some(weights) })
            }
            Fusion::Sum(op) => {
                check_arity(op, inputs)?;
                Ok(FusionOutput { fused: sum_fuse(g, inputs)?, weights: None })
            }
            Fusion::Concat(c) => {
                check_arity(&c.op, inputs)?;
                Ok(FusionOutput { fused: concat_fuse(g, store, inputs, &c.proj)?, weights: None })
            }
        }
    }
}

fn check_arity(op: &FusionOp, inputs: &[NodeId]) -> Result<()> {
    if inputs.len() != op.arity {
        return Err(config_err!("fusion site has arity {} but received {} inputs", op.arity, inputs.len()));
    }
    Ok(())
}

fn check_same_shapes<T: Real>(g: &Graph<T>, inputs: &[NodeId]) -> Result<()> {
    let first = *inputs.first().ok_or_else(|| shape_err!("fusion needs at least one input"))?;
    let s0 = g.shape(first);
    for &i in &inputs[1..] {
        if g.shape(i) != s0 {
            return Err(shape_err!("fusion inputs differ: {} vs {s0}", g.shape(i)));
        }
    }
    Ok(())
}

/// Adaptive spatial fusion. Returns the fused map and its weight map.
///
/// The convex combination is evaluated as `x_last - sum_k w_k (x_last - x_k)`
/// over `k < last`, which equals `sum_k w_k x_k` whenever the weights sum to
/// one and reproduces the input exactly when all inputs coincide.
pub fn adaptive_fuse<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inputs: &[NodeId],
    fusion: &AdaptiveFusion,
) -> Result<(NodeId, NodeId)> {
    check_arity(&fusion.op, inputs)?;
    check_same_shapes(g, inputs)?;
    let compressed = inputs
        .iter()
        .zip(&fusion.compress)
        .map(|(&x, conv)| conv.forward(g, store, x))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat_channels(&compressed)?;
    let logits = fusion.logits.forward(g, store, cat)?;
    let weights = g.softmax_channels(logits)?;
    let fused = convex_combine(g, weights, inputs)?;
    Ok((fused, weights))
}

/// `sum_k weights[k] * inputs[k]` for simplex weights `(n, arity, h, w)`.
pub fn convex_combine<T: Real>(g: &mut Graph<T>, weights: NodeId, inputs: &[NodeId]) -> Result<NodeId> {
    check_same_shapes(g, inputs)?;
    if g.shape(weights).c != inputs.len() {
        return Err(shape_err!("{} weight channels for {} inputs", g.shape(weights).c, inputs.len()));
    }
    let (&last, rest) = inputs.split_last().expect("non-empty inputs");
    let mut acc: Option<NodeId> = None;
    for (k, &x) in rest.iter().enumerate() {
        let w = g.select_channel(weights, k)?;
        let diff = g.sub(last, x)?;
        let term = g.mul_broadcast_channel(w, diff)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    match acc {
        Some(a) => g.sub(last, a),
        None => Ok(last),
    }
}

pub fn sum_fuse<T: Real>(g: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId> {
    check_same_shapes(g, inputs)?;
    let mut acc = inputs[0];
    for &x in &inputs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// Channel concat followed by a 1x1 projection back to the level width.
pub fn concat_fuse<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inputs: &[NodeId],
    proj: &Conv2dLayer,
) -> Result<NodeId> {
    check_same_shapes(g, inputs)?;
    let cat = g.concat_channels(inputs)?;
    proj.forward(g, store, cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<T: Real>(kind: FusionKind, arity: usize, c: usize) -> (ParamStore<T>, Fusion) {
        let mut store = ParamStore::new();
        let op = FusionOp::new(kind, arity, 8, c).unwrap();
        let f = Fusion::new(&mut store, &mut Initializer::new(11), "fuse", op, false).unwrap();
        (store, f)
    }

    #[test]
    fn kind_parses_table_vocabulary() {
        assert_eq!("adaptive".parse::<FusionKind>().unwrap(), FusionKind::Adaptive);
        assert_eq!("sum".parse::<FusionKind>().unwrap(), FusionKind::Sum);
        assert_eq!("concat".parse::<FusionKind>().unwrap(), FusionKind::Concat);
        assert!("attention".parse::<FusionKind>().is_err());
        assert!(FusionOp::new(FusionKind::Sum, 5, 8, 4).is_err());
    }

    #[test]
    fn hand_weights_two_inputs() {
        // weights (0.25, 0.75) on inputs 4 and 8 -> 0.25 * 4 + 0.75 * 8 = 7
        let mut g = Graph::<f64>::new();
        let s = Shape::new(1, 1, 1, 1);
        let w = g.input(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.25, 0.75]).unwrap(), false).unwrap();
        let a = g.input(Tensor::full(s, 4.0), false).unwrap();
        let b = g.input(Tensor::full(s, 8.0), false).unwrap();
        let y = convex_combine(&mut g, w, &[a, b]).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[7.0]);
    }

    #[test]
    fn identical_inputs_reproduce_input_bitwise() {
        for arity in 2..=4 {
            let (store, f) = build::<f64>(FusionKind::Adaptive, arity, 3);
            let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut ChaCha8Rng::seed_from_u64(arity as u64));
            let mut g = Graph::new();
            let ids: Vec<_> = (0..arity).map(|_| g.input(x.clone(), false).unwrap()).collect();
            let out = f.forward(&mut g, &store, &ids).unwrap();
            assert_eq!(g.value(out.fused).unwrap(), &x);
        }
    }

    #[test]
    fn equal_logits_give_mean() {
        let (mut store, f) = build::<f64>(FusionKind::Adaptive, 3, 2);
        let Fusion::Adaptive(a) = &f else { unreachable!() };
        let ws = store.get(a.logits.weight).value.shape();
        store.get_mut(a.logits.weight).value = Tensor::zeros(ws);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<_> = (0..3).map(|_| Tensor::<f64>::randn(Shape::new(1, 2, 3, 3), 1.0, &mut rng)).collect();
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|x| g.input(x.clone(), false).unwrap()).collect();
        let out = f.forward(&mut g, &store, &ids).unwrap();
        let fused = g.value(out.fused).unwrap();
        for i in 0..fused.len() {
            let mean = (xs[0].data()[i] + xs[1].data()[i] + xs[2].data()[i]) / 3.0;
            assert!((fused.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_fuse_basics() {
        let mut g = Graph::<f32>::new();
        let s = Shape::new(1, 2, 3, 3);
        let a = g.input(Tensor::ones(s), false).unwrap();
        let b = g.input(Tensor::ones(s), false).unwrap();
        let y = sum_fuse(&mut g, &[a, b]).unwrap();
        assert!(g.value(y).unwrap().data().iter().all(|&v| v == 2.0));
        let x = Tensor::<f32>::randn(s, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let xn = g.input(x.clone(), false).unwrap();
        let z = g.input(Tensor::zeros(s), false).unwrap();
        let y = sum_fuse(&mut g, &[xn, z]).unwrap();
        assert_eq!(g.value(y).unwrap(), &x);
    }

    #[test]
    fn concat_shapes_params_and_selector() {
        let (mut store, f) = build::<f64>(FusionKind::Concat, 2, 4);
        assert_eq!(store.numel(), 4 * (2 * 4) + 4);
        let Fusion::Concat(c) = &f else { unreachable!() };
        store.get_mut(c.proj.weight).value = Tensor::from_fn(Shape::new(4, 8, 1, 1), |o, i, _, _| f64::from(o == i));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(Shape::new(1, 4, 3, 3), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(1, 4, 3, 3), 1.0, &mut rng);
        let mut g = Graph::new();
        let ids = [g.input(a.clone(), false).unwrap(), g.input(b, false).unwrap()];
        let out = f.forward(&mut g, &store, &ids).unwrap();
        assert_eq!(g.value(out.fused).unwrap(), &a);
        let cat = g.nodes().find(|n| n.kind.name() == "concat_channels").unwrap();
        assert_eq!(cat.shape, Shape::new(1, 8, 3, 3));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (store, f) = build::<f32>(FusionKind::Adaptive, 2, 4);
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(Shape::new(1, 4, 4, 4)), false).unwrap();
        let b = g.input(Tensor::zeros(Shape::new(1, 4, 2, 2)), false).unwrap();
        assert!(matches!(f.forward(&mut g, &store, &[a, b]), Err(Error::Shape(_))));
        assert!(matches!(f.forward(&mut g, &store, &[a]), Err(Error::Config(_))));
    }
}
