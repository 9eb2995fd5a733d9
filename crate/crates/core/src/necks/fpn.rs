//! FPN and PAFPN baselines at a uniform `out_channels` width.

use std::collections::BTreeMap;

use crate::error::{config_err, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv2dLayer, ConvSpec};
use crate::necks::config::{NeckConfig, Variant};
use crate::necks::model::{NeckGraph, P6Head};
use crate::param::{Initializer, ParamStore};
use crate::scale_align::upsample;
use crate::tensor::Real;

/// Extra bottom-up path of PAFPN.
#[derive(Clone, Debug)]
pub struct BottomUp {
    /// 3x3 stride-2 conv from level `l` to `l + 1`, keyed by the target level.
    pub downs: BTreeMap<u8, Conv2dLayer>,
    pub outs: BTreeMap<u8, Conv2dLayer>,
}

#[derive(Clone, Debug)]
pub struct FpnBody {
    pub levels: Vec<u8>,
    pub laterals: BTreeMap<u8, Conv2dLayer>,
    pub outs: BTreeMap<u8, Conv2dLayer>,
    pub bottom_up: Option<BottomUp>,
    pub p6: Option<P6Head>,
    pub align_corners: bool,
}

impl FpnBody {
    pub fn build<T: Real>(config: &NeckConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        let with_bottom_up = match config.variant {
            Variant::Fpn => false,
            Variant::Pafpn => true,
            other => return Err(config_err!("{other} is not an FPN baseline")),
        };
        let levels = config.input_levels();
        let c = config.out_channels;
        let mut laterals = BTreeMap::new();
        let mut outs = BTreeMap::new();
        for (&l, &c_in) in levels.iter().zip(&config.backbone_channels) {
            laterals.insert(l, Conv2dLayer::new(store, init, &format!("lateral.c{l}"), ConvSpec::pointwise(c_in, c))?);
        }
        for &l in &levels {
            outs.insert(l, Conv2dLayer::new(store, init, &format!("fpn_out.p{l}"), ConvSpec::new(c, c, 3, 1, 1))?);
        }
        let bottom_up = if with_bottom_up {
            let mut downs = BTreeMap::new();
            let mut bu_outs = BTreeMap::new();
            for &l in &levels[1..] {
                downs.insert(l, Conv2dLayer::new(store, init, &format!("bottom_up.down{l}"), ConvSpec::new(c, c, 3, 2, 1))?);
                bu_outs.insert(l, Conv2dLayer::new(store, init, &format!("bottom_up.out{l}"), ConvSpec::new(c, c, 3, 1, 1))?);
            }
            Some(BottomUp { downs, outs: bu_outs })
        } else {
            None
        };
        let p6 = if config.has_p6() { Some(P6Head::new(store, init, c)?) } else { None };
        Ok(FpnBody { levels, laterals, outs, bottom_up, p6, align_corners: config.align_corners })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &BTreeMap<u8, NodeId>,
    ) -> Result<NeckGraph> {
        let mut lateral = BTreeMap::new();
        for (&l, conv) in &self.laterals {
            lateral.insert(l, conv.forward(g, store, inputs[&l])?);
        }
        // top-down: inner_l = lateral_l + up2(inner_{l+1})
        let mut inner = BTreeMap::new();
        let mut above: Option<NodeId> = None;
        for &l in self.levels.iter().rev() {
            let node = match above {
                None => lateral[&l],
                Some(coarser) => g.scoped(format!("top_down.p{l}"), |g| {
                    let up = upsample(g, store, coarser, 2, None, self.align_corners)?;
                    g.add(lateral[&l], up)
                })?,
            };
            inner.insert(l, node);
            above = Some(node);
        }
        let mut outputs = BTreeMap::new();
        for (&l, conv) in &self.outs {
            outputs.insert(l, conv.forward(g, store, inner[&l])?);
        }

        if let Some(bu) = &self.bottom_up {
            let mut prev = outputs[&self.levels[0]];
            for &l in &self.levels[1..] {
                let down = bu.downs[&l].forward(g, store, prev)?;
                let merged = g.scoped(format!("bottom_up.p{l}"), |g| g.add(outputs[&l], down))?;
                let out = bu.outs[&l].forward(g, store, merged)?;
                outputs.insert(l, out);
                prev = out;
            }
        }

        if let Some(p6) = &self.p6 {
            let top = *self.levels.last().expect("levels");
            let p = p6.forward(g, store, outputs[&top])?;
            outputs.insert(top + 1, p);
        }
        Ok(NeckGraph { outputs, fusion_weights: Vec::new() })
    }
}
