//! Static parameter and FLOP accounting over a shape-only trace.
//!
//! A multiply-accumulate counts as 2 FLOPs. Per node:
//! conv `2*kh*kw*c_in*c_out*h_out*w_out` (+ `c_out*h_out*w_out` with bias),
//! bilinear resize 8 per output element, channel softmax `5*c` per position,
//! batch norm 2 per element, other elementwise ops 1 per element, and
//! concatenation or channel selection 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, NodeInfo, OpKind};
use crate::necks::model::NeckModel;
use crate::necks::Variant;
use crate::tensor::{Real, Shape};

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs; bilinear 8/element; softmax 5*c/position; \
     batchnorm 2/element; elementwise 1/element; concat/select 0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub inputs: Vec<Shape>,
    pub output: Shape,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub variant: Variant,
    /// Base image size `(h, w)`.
    pub resolution: (usize, usize),
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

/// FLOPs of one recorded op given its operand shapes.
pub fn op_flops(kind: &OpKind, inputs: &[Shape], output: Shape) -> u64 {
    let out = output.numel() as u64;
    match *kind {
        OpKind::Conv2d { kernel_h, kernel_w, bias, .. } => {
            let c_in = inputs[0].c as u64;
            let mac = (kernel_h * kernel_w) as u64 * c_in * out;
            2 * mac + if bias { out } else { 0 }
        }
        OpKind::BilinearResize { .. } => 8 * out,
        OpKind::SoftmaxChannels => 5 * out,
        OpKind::Relu | OpKind::Add | OpKind::Sub | OpKind::MulBroadcastChannel => out,
        OpKind::BatchNorm => 2 * out,
        OpKind::Sum => inputs[0].numel() as u64,
        OpKind::Mse => 3 * inputs[0].numel() as u64,
        OpKind::Input | OpKind::Param | OpKind::ConcatChannels | OpKind::SelectChannel { .. } => 0,
    }
}

fn row_of<T: Real>(g: &Graph<T>, info: &NodeInfo<'_>) -> CostRow {
    let mut inputs = Vec::new();
    let mut params = 0u64;
    for &id in &info.inputs {
        let node = g.node(id);
        if matches!(node.kind, OpKind::Param) {
            params += node.shape.numel() as u64;
        } else {
            inputs.push(node.shape);
        }
    }
    CostRow {
        name: info.name.to_string(),
        kind: info.kind.to_string(),
        flops: op_flops(info.kind, &inputs, info.shape),
        inputs,
        output: info.shape,
        params,
    }
}

/// Element count of the parameter registry.
pub fn count_params<T: Real>(model: &NeckModel<T>) -> u64 {
    model.params().numel() as u64
}

pub fn count_flops<T: Real>(model: &NeckModel<T>, resolution: usize) -> Result<u64> {
    Ok(cost_report(model, resolution)?.totals.flops)
}

/// Per-node cost rows for a batch-1 square image of side `resolution`.
pub fn cost_report<T: Real>(model: &NeckModel<T>, resolution: usize) -> Result<CostReport> {
    let trace = model.trace_at(resolution)?;
    let rows: Vec<CostRow> = trace
        .graph
        .nodes()
        .filter(|n| !matches!(n.kind, OpKind::Input | OpKind::Param))
        .map(|n| row_of(&trace.graph, &n))
        .collect();
    let totals = CostTotals { params: rows.iter().map(|r| r.params).sum(), flops: rows.iter().map(|r| r.flops).sum() };
    Ok(CostReport {
        convention: FLOP_CONVENTION.to_string(),
        variant: model.config().variant,
        resolution: (resolution, resolution),
        rows,
        totals,
    })
}

fn shape_str(s: Shape) -> String {
    format!("{}x{}x{}x{}", s.n, s.c, s.h, s.w)
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let ins: Vec<String> =
            self.rows.iter().map(|r| r.inputs.iter().map(|s| shape_str(*s)).collect::<Vec<_>>().join(",")).collect();
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        let kind_w = self.rows.iter().map(|r| r.kind.len()).max().unwrap_or(0).max(4);
        let in_w = ins.iter().map(|s| s.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "# {} at {}x{}", self.variant, self.resolution.0, self.resolution.1);
        let _ = writeln!(out, "# FLOP convention: {}", self.convention);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:<in_w$}  {:<16}  {:>10}  {:>14}",
            "name", "kind", "inputs", "output", "params", "flops"
        );
        for (r, i) in self.rows.iter().zip(&ins) {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<kind_w$}  {:<in_w$}  {:<16}  {:>10}  {:>14}",
                r.name,
                r.kind,
                i,
                shape_str(r.output),
                r.params,
                r.flops
            );
        }
        let _ = writeln!(out, "total params {}  total flops {} ({:.3} GFLOPs)", self.totals.params, self.totals.flops, self.gflops());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::ConfigParse(e.to_string()))
    }

    pub fn gflops(&self) -> f64 {
        self.totals.flops as f64 / 1e9
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub variant: Variant,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub convention: String,
    pub resolution: (usize, usize),
    pub rows: Vec<ComparisonRow>,
    /// Whether every AFPN row has fewer FLOPs than every FPN row; `None` if either is absent.
    pub afpn_below_fpn: Option<bool>,
}

pub fn compare<T: Real>(models: &[(String, &NeckModel<T>)], resolution: usize) -> Result<Comparison> {
    let mut rows = Vec::new();
    for (label, model) in models {
        let report = cost_report(model, resolution)?;
        rows.push(ComparisonRow {
            label: label.clone(),
            variant: model.config().variant,
            params: report.totals.params,
            flops: report.totals.flops,
        });
    }
    let afpn: Vec<u64> = rows.iter().filter(|r| r.variant.is_afpn()).map(|r| r.flops).collect();
    let fpn: Vec<u64> = rows.iter().filter(|r| r.variant == Variant::Fpn).map(|r| r.flops).collect();
    let afpn_below_fpn = if afpn.is_empty() || fpn.is_empty() {
        None
    } else {
        Some(afpn.iter().max() < fpn.iter().min())
    };
    Ok(Comparison { convention: FLOP_CONVENTION.to_string(), resolution: (resolution, resolution), rows, afpn_below_fpn })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "# cost comparison at {}x{}", self.resolution.0, self.resolution.1);
        let _ = writeln!(out, "# FLOP convention: {}", self.convention);
        let _ = writeln!(out, "{:<label_w$}  {:<10}  {:>12}  {:>16}  {:>9}", "model", "variant", "params", "flops", "GFLOPs");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<label_w$}  {:<10}  {:>12}  {:>16}  {:>9.3}",
                r.label,
                r.variant.name(),
                r.params,
                r.flops,
                r.flops as f64 / 1e9
            );
        }
        match self.afpn_below_fpn {
            Some(true) => out.push_str("AFPN FLOPs below FPN: yes\n"),
            Some(false) => out.push_str("AFPN FLOPs below FPN: NO\n"),
            None => {}
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
