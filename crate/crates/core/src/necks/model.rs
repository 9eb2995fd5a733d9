use std::collections::BTreeMap;

use crate::error::{config_err, shape_err, Result};
use crate::fusion::{FusionKind, FusionWeights};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv2dLayer, ConvSpec};
use crate::necks::afpn::AfpnBody;
use crate::necks::config::NeckConfig;
use crate::necks::fpn::FpnBody;
use crate::necks::pyramid::FeaturePyramid;
use crate::param::{Initializer, ParamStore};
use crate::scale_align::ResampleKind;
use crate::tensor::{Real, Shape};

/// P6 from P5: 3x3 stride-2 conv, then 3x3 stride-1 conv.
#[derive(Clone, Debug)]
pub struct P6Head {
    pub down: Conv2dLayer,
    pub conv: Conv2dLayer,
}

impl P6Head {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, channels: usize) -> Result<Self> {
        Ok(P6Head {
            down: Conv2dLayer::new(store, init, "p6.down", ConvSpec::new(channels, channels, 3, 2, 1))?,
            conv: Conv2dLayer::new(store, init, "p6.conv", ConvSpec::new(channels, channels, 3, 1, 1))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, p5: NodeId) -> Result<NodeId> {
        make_p6(g, store, p5, self)
    }
}

pub fn make_p6<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, p5: NodeId, head: &P6Head) -> Result<NodeId> {
    let s = g.shape(p5);
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(shape_err!("P6 needs P5 dims divisible by 2, got {}x{}", s.h, s.w));
    }
    let y = head.down.forward(g, store, p5)?;
    head.conv.forward(g, store, y)
}

/// Adaptive fusion weight maps keyed by site name.
pub type NamedWeights<T> = Vec<(String, FusionWeights<T>)>;

/// Output nodes of one neck forward pass.
#[derive(Clone, Debug)]
pub struct NeckGraph {
    pub outputs: BTreeMap<u8, NodeId>,
    /// Adaptive fusion weight maps by site name, in evaluation order.
    pub fusion_weights: Vec<(String, NodeId)>,
}

#[derive(Clone, Debug)]
pub enum NeckBody {
    Afpn(AfpnBody),
    Fpn(FpnBody),
}

/// Structural summary of one fusion site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTopology {
    pub stage: usize,
    pub target: u8,
    pub arity: usize,
    pub fusion: FusionKind,
    pub sources: Vec<(u8, ResampleKind)>,
}

/// A built neck: config, parameter registry and the structure that records its graph.
#[derive(Clone, Debug)]
pub struct NeckModel<T> {
    config: NeckConfig,
    params: ParamStore<T>,
    body: NeckBody,
}

/// Recorded shape-only forward pass.
pub struct Trace<T: Real> {
    pub graph: Graph<T>,
    pub inputs: BTreeMap<u8, NodeId>,
    pub outputs: NeckGraph,
}

pub fn build_afpn<T: Real>(config: &NeckConfig) -> Result<NeckModel<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut init = Initializer::new(config.seed);
    let body = AfpnBody::build(config, &mut params, &mut init)?;
    Ok(NeckModel { config: config.clone(), params, body: NeckBody::Afpn(body) })
}

fn build_baseline<T: Real>(config: &NeckConfig) -> Result<NeckModel<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut init = Initializer::new(config.seed);
    let body = FpnBody::build(config, &mut params, &mut init)?;
    Ok(NeckModel { config: config.clone(), params, body: NeckBody::Fpn(body) })
}

pub fn build_fpn<T: Real>(config: &NeckConfig) -> Result<NeckModel<T>> {
    if config.variant != crate::necks::Variant::Fpn {
        return Err(config_err!("build_fpn needs variant fpn, got {}", config.variant));
    }
    build_baseline(config)
}

pub fn build_pafpn<T: Real>(config: &NeckConfig) -> Result<NeckModel<T>> {
    if config.variant != crate::necks::Variant::Pafpn {
        return Err(config_err!("build_pafpn needs variant pafpn, got {}", config.variant));
    }
    build_baseline(config)
}

/// Builds whichever neck `config.variant` names.
pub fn build<T: Real>(config: &NeckConfig) -> Result<NeckModel<T>> {
    if config.variant.is_afpn() {
        build_afpn(config)
    } else {
        build_baseline(config)
    }
}

impl<T: Real> NeckModel<T> {
    pub fn config(&self) -> &NeckConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn body(&self) -> &NeckBody {
        &self.body
    }

    fn check_inputs(&self, shapes: &BTreeMap<u8, Shape>) -> Result<()> {
        let expected = self.config.input_levels();
        for (&l, &c) in expected.iter().zip(&self.config.backbone_channels) {
            let s = shapes.get(&l).ok_or_else(|| config_err!("missing input level C{l}"))?;
            if s.c != c {
                return Err(shape_err!("C{l} has {} channels, config expects {c}", s.c));
            }
        }
        if let Some(extra) = shapes.keys().find(|l| !expected.contains(l)) {
            return Err(config_err!("unexpected input level C{extra} for {}", self.config.variant));
        }
        Ok(())
    }

    /// Records the neck into `g` on top of the given input nodes.
    pub fn forward_graph(&self, g: &mut Graph<T>, inputs: &BTreeMap<u8, NodeId>) -> Result<NeckGraph> {
        let shapes = inputs.iter().map(|(&l, &id)| (l, g.shape(id))).collect();
        self.check_inputs(&shapes)?;
        match &self.body {
            NeckBody::Afpn(b) => b.forward(g, &self.params, inputs),
            NeckBody::Fpn(b) => b.forward(g, &self.params, inputs),
        }
    }

    /// Runs the neck and returns `P_l` plus every adaptive fusion weight map.
    pub fn forward_with_weights(
        &self,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<(FeaturePyramid<T>, NamedWeights<T>)> {
        let mut g = Graph::new();
        let mut inputs = BTreeMap::new();
        for (l, t) in pyramid.iter() {
            inputs.insert(l, g.input(t.clone(), false)?);
        }
        let out = self.forward_graph(&mut g, &inputs)?;
        let mut levels = BTreeMap::new();
        for (&l, &id) in &out.outputs {
            levels.insert(l, g.value(id)?.clone());
        }
        let weights = out
            .fusion_weights
            .iter()
            .map(|(name, id)| Ok((name.clone(), FusionWeights(g.value(*id)?.clone()))))
            .collect::<Result<_>>()?;
        Ok((FeaturePyramid::new(levels)?, weights))
    }

    pub fn forward(&self, pyramid: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        Ok(self.forward_with_weights(pyramid)?.0)
    }

    /// Shape-only pass over inputs of the given shapes.
    pub fn trace(&self, input_shapes: &BTreeMap<u8, Shape>) -> Result<Trace<T>> {
        let mut graph = Graph::shape_only();
        let mut inputs = BTreeMap::new();
        for (&l, &s) in input_shapes {
            inputs.insert(l, graph.scoped(format!("c{l}"), |g| g.placeholder(s))?);
        }
        let outputs = self.forward_graph(&mut graph, &inputs)?;
        Ok(Trace { graph, inputs, outputs })
    }

    /// Shape-only pass at a square image resolution, batch 1.
    pub fn trace_at(&self, resolution: usize) -> Result<Trace<T>> {
        let shapes = crate::necks::pyramid::input_shapes(&self.config, resolution, 1)?;
        self.trace(&shapes)
    }

    pub fn output_shapes(&self, resolution: usize) -> Result<BTreeMap<u8, Shape>> {
        let trace = self.trace_at(resolution)?;
        Ok(trace.outputs.outputs.iter().map(|(&l, &id)| (l, trace.graph.shape(id))).collect())
    }

    /// Fusion sites in stage order; empty for the baselines.
    pub fn topology(&self) -> Vec<SiteTopology> {
        match &self.body {
            NeckBody::Afpn(b) => b
                .stages
                .iter()
                .flat_map(|stage| {
                    stage.sites.iter().map(move |site| SiteTopology {
                        stage: stage.index,
                        target: site.target,
                        arity: site.fusion.op().arity,
                        fusion: site.fusion.op().kind,
                        sources: site.sources.iter().map(|(l, r)| (*l, r.kind)).collect(),
                    })
                })
                .collect(),
            NeckBody::Fpn(_) => Vec::new(),
        }
    }

    /// Number of fusion stages (0 for the baselines).
    pub fn stage_count(&self) -> usize {
        match &self.body {
            NeckBody::Afpn(b) => b.stages.len(),
            NeckBody::Fpn(_) => 0,
        }
    }

    /// Parameter count of all fusion operators (weight paths or projections).
    pub fn fusion_param_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| p.name.contains(".fuse.")).map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> NeckModel<U> {
        NeckModel { config: self.config.clone(), params: self.params.cast(), body: self.body.clone() }
    }
}
