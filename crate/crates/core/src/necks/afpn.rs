//! The asymptotic pyramid body.
//!
//! Stage 0 reduces every `C_l` to its internal width with a 1x1 conv block.
//! Stage 1 fuses the two finest levels; each later stage admits the next
//! coarser level. At every stage each live level fuses resampled copies of
//! all live levels and then runs a residual stack. Output heads are 1x1
//! convs to `out_channels`; the four-level variant appends P6.

use std::collections::BTreeMap;

use crate::blocks::{residual_stack, ConvBlock, ResidualStack};
use crate::error::{config_err, Result};
use crate::fusion::{Fusion, FusionOp};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv2dLayer, ConvSpec};
use crate::necks::config::NeckConfig;
use crate::necks::model::{NeckGraph, P6Head};
use crate::param::{Initializer, ParamStore};
use crate::scale_align::{ResampleKind, ResamplePolicy, Resampler};
use crate::tensor::Real;

/// One target level of one stage.
#[derive(Clone, Debug)]
pub struct FusionSite {
    pub name: String,
    pub target: u8,
    /// Source level and the resampler carrying it to `target`, finest source first.
    pub sources: Vec<(u8, Resampler)>,
    pub fusion: Fusion,
    pub residual: ResidualStack,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub index: usize,
    /// Levels taking part in this stage, finest first.
    pub live: Vec<u8>,
    pub sites: Vec<FusionSite>,
}

#[derive(Clone, Debug)]
pub struct AfpnBody {
    pub levels: Vec<u8>,
    pub widths: BTreeMap<u8, usize>,
    pub stems: BTreeMap<u8, ConvBlock>,
    pub stages: Vec<Stage>,
    pub heads: BTreeMap<u8, Conv2dLayer>,
    pub p6: Option<P6Head>,
}

impl AfpnBody {
    pub fn build<T: Real>(config: &NeckConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        if !config.variant.is_afpn() {
            return Err(config_err!("{} is not an AFPN variant", config.variant));
        }
        let levels = config.input_levels();
        let widths: BTreeMap<u8, usize> = levels.iter().copied().zip(config.internal_widths()).collect();
        let policy = ResamplePolicy { norm_act: config.resample_norm_act, align_corners: config.align_corners };

        let mut stems = BTreeMap::new();
        for (&l, &c_in) in levels.iter().zip(&config.backbone_channels) {
            let spec = ConvSpec::pointwise(c_in, widths[&l]);
            stems.insert(l, ConvBlock::new(store, init, &format!("stem.c{l}"), spec, config.norm, true)?);
        }

        let mut stages = Vec::new();
        for index in 1..levels.len() {
            let live = levels[..=index].to_vec();
            let mut sites = Vec::new();
            for &target in &live {
                let name = format!("stage{index}.l{target}");
                let mut sources = Vec::new();
                for &src in &live {
                    let kind = ResampleKind::between(src, target);
                    let r = Resampler::new(
                        store,
                        init,
                        &format!("{name}.from{src}"),
                        kind,
                        widths[&src],
                        widths[&target],
                        levels.len(),
                        policy,
                    )?;
                    sources.push((src, r));
                }
                let op = FusionOp::new(config.fusion, live.len(), config.compress_channels, widths[&target])?;
                let fusion = Fusion::new(store, init, &format!("{name}.fuse"), op, config.norm)?;
                let residual = ResidualStack::new(
                    store,
                    init,
                    &format!("{name}.blocks"),
                    widths[&target],
                    config.residual_units,
                    config.norm,
                )?;
                sites.push(FusionSite { name, target, sources, fusion, residual });
            }
            stages.push(Stage { index, live, sites });
        }

        let mut heads = BTreeMap::new();
        for &l in &levels {
            let spec = ConvSpec::pointwise(widths[&l], config.out_channels);
            heads.insert(l, Conv2dLayer::new(store, init, &format!("head.p{l}"), spec)?);
        }
        let p6 = if config.has_p6() { Some(P6Head::new(store, init, config.out_channels)?) } else { None };
        Ok(AfpnBody { levels, widths, stems, stages, heads, p6 })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &BTreeMap<u8, NodeId>,
    ) -> Result<NeckGraph> {
        let mut reduced = BTreeMap::new();
        for (&l, stem) in &self.stems {
            reduced.insert(l, stem.forward(g, store, inputs[&l])?);
        }
        let mut current: BTreeMap<u8, NodeId> = BTreeMap::new();
        let mut fusion_weights = Vec::new();
        for stage in &self.stages {
            let live: BTreeMap<u8, NodeId> =
                stage.live.iter().map(|l| (*l, current.get(l).copied().unwrap_or(reduced[l]))).collect();
            let mut next = BTreeMap::new();
            for site in &stage.sites {
                let y = g.scoped(site.name.clone(), |g| {
                    let resampled = site
                        .sources
                        .iter()
                        .map(|(src, r)| r.forward(g, store, live[src]))
                        .collect::<Result<Vec<_>>>()?;
                    let out = g.scoped(format!("{}.fuse", site.name), |g| site.fusion.forward(g, store, &resampled))?;
                    if let Some(w) = out.weights {
                        fusion_weights.push((site.name.clone(), w));
                    }
                    residual_stack(g, store, &site.residual, out.fused)
                })?;
                next.insert(site.target, y);
            }
            current = next;
        }

        let mut outputs = BTreeMap::new();
        for (&l, head) in &self.heads {
            outputs.insert(l, head.forward(g, store, current[&l])?);
        }
        if let Some(p6) = &self.p6 {
            let top = *self.levels.last().expect("levels");
            let p = p6.forward(g, store, outputs[&top])?;
            outputs.insert(top + 1, p);
        }
        Ok(NeckGraph { outputs, fusion_weights })
    }
}
