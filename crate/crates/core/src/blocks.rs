//! Conv blocks and ResNet-v1 style residual units.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{BatchNormLayer, Conv2dLayer, ConvSpec};
use crate::param::{Initializer, ParamStore};
use crate::tensor::Real;

/// `conv -> [norm] -> [relu]`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2dLayer,
    pub norm: Option<BatchNormLayer>,
    pub act: bool,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        spec: ConvSpec,
        norm: bool,
        act: bool,
    ) -> Result<Self> {
        let conv = Conv2dLayer::new(store, init, &format!("{name}.conv"), spec)?;
        let norm = if norm { Some(BatchNormLayer::new(store, &format!("{name}.bn"), spec.c_out)?) } else { None };
        Ok(ConvBlock { conv, norm, act })
    }

    pub fn spec(&self) -> ConvSpec {
        self.conv.spec
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut y = self.conv.forward(g, store, x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, store, y)?;
        }
        if self.act {
            y = g.relu(y)?;
        }
        Ok(y)
    }
}

/// Two 3x3 convolutions with an identity skip: `relu(x + F(x))`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub name: String,
    pub channels: usize,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
}

impl ResidualUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        norm: bool,
    ) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3, 1, 1);
        Ok(ResidualUnit {
            name: name.to_string(),
            channels,
            conv1: ConvBlock::new(store, init, &format!("{name}.conv1"), spec, norm, true)?,
            conv2: ConvBlock::new(store, init, &format!("{name}.conv2"), spec, norm, false)?,
        })
    }
}

pub fn residual_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    unit: &ResidualUnit,
    x: NodeId,
) -> Result<NodeId> {
    let c = g.shape(x).c;
    if c != unit.channels {
        return Err(shape_err!("residual unit {} expects {} channels, got {c}", unit.name, unit.channels));
    }
    g.scoped(unit.name.clone(), |g| {
        let h = unit.conv1.forward(g, store, x)?;
        let h = unit.conv2.forward(g, store, h)?;
        let y = g.add(x, h)?;
        g.relu(y)
    })
}

/// A sequence of residual units sharing one channel width.
///
/// The last conv of every branch starts at `1 / sqrt(depth)` of its He scale
/// so an unnormalized stack does not grow activations with depth.
#[derive(Clone, Debug)]
pub struct ResidualStack {
    pub units: Vec<ResidualUnit>,
}

impl ResidualStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        depth: usize,
        norm: bool,
    ) -> Result<Self> {
        let units: Vec<ResidualUnit> = (0..depth)
            .map(|i| ResidualUnit::new(store, init, &format!("{name}.unit{i}"), channels, norm))
            .collect::<Result<_>>()?;
        let scale = T::from_f64_lossy(1.0 / (depth.max(1) as f64).sqrt());
        for unit in &units {
            let w = &mut store.get_mut(unit.conv2.conv.weight).value;
            *w = w.map(|v| v * scale);
        }
        Ok(ResidualStack { units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

pub fn residual_stack<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    stack: &ResidualStack,
    x: NodeId,
) -> Result<NodeId> {
    stack.units.iter().try_fold(x, |h, unit| residual_forward(g, store, unit, h))
}
