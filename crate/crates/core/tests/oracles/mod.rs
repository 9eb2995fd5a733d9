//! Reference implementations written straight from definitions, shared by the
//! kernel and cost tests and by the acceptance run.
#![allow(dead_code)]

use afpn_core::necks::{NeckConfig, Variant};
use afpn_core::{FusionKind, Shape, Tensor};

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Seven nested loops straight from the definition of cross-correlation.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> (Shape, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let ho = (xs.h + 2 * pad - ws.h) / stride + 1;
    let wo = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Vec::new();
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (Shape::new(xs.n, ws.n, ho, wo), out)
}

/// `sum_ij x[i][j] * tri(sy - i) * tri(sx - j)` with the source point clamped into the grid.
pub fn triangle_resize(x: &Tensor<f64>, oh: usize, ow: usize, align_corners: bool) -> Vec<f64> {
    let s = x.shape();
    let src = |d: usize, out: usize, inp: usize| -> f64 {
        let v = if align_corners {
            if out == 1 {
                0.0
            } else {
                d as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
            }
        } else {
            (d as f64 + 0.5) * inp as f64 / out as f64 - 0.5
        };
        v.clamp(0.0, inp as f64 - 1.0)
    };
    let tri = |t: f64| (1.0 - t.abs()).max(0.0);
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (sy, sx) = (src(oy, oh, s.h), src(ox, ow, s.w));
                    let mut acc = 0.0;
                    for i in 0..s.h {
                        for j in 0..s.w {
                            acc += x.at(n, c, i, j) * tri(sy - i as f64) * tri(sx - j as f64);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[derive(Default, Debug, PartialEq, Eq, Clone, Copy)]
pub struct Count {
    pub params: u64,
    pub flops: u64,
}

impl Count {
    fn conv(&mut self, ci: u64, co: u64, k: u64, side: u64) {
        self.params += ci * co * k * k + co;
        self.flops += 2 * k * k * ci * co * side * side + co * side * side;
    }
    fn bn(&mut self, c: u64, side: u64) {
        self.params += 2 * c;
        self.flops += 2 * c * side * side;
    }
    fn eltwise(&mut self, c: u64, side: u64, ops: u64) {
        self.flops += ops * c * side * side;
    }
}

pub fn hand_count_afpn(cfg: &NeckConfig, res: u64) -> Count {
    let mut n = Count::default();
    let levels: Vec<u64> = if cfg.backbone_channels.len() == 4 { vec![2, 3, 4, 5] } else { vec![3, 4, 5] };
    let side = |l: u64| res >> l;
    let width = |i: usize| (cfg.backbone_channels[i] / cfg.width_divisor) as u64;
    let norm = cfg.norm;
    for (i, &l) in levels.iter().enumerate() {
        n.conv(cfg.backbone_channels[i] as u64, width(i), 1, side(l));
        if norm {
            n.bn(width(i), side(l));
        }
        n.eltwise(width(i), side(l), 1);
    }
    for stage in 1..levels.len() {
        let live = &levels[..=stage];
        let a = live.len() as u64;
        for (ti, &t) in live.iter().enumerate() {
            let (wt, st) = (width(ti), side(t));
            for (si, &s) in live.iter().enumerate() {
                if s > t {
                    n.conv(width(si), wt, 1, side(s));
                    n.eltwise(wt, st, 8);
                } else if s < t {
                    n.conv(width(si), wt, 1 << (t - s), st);
                }
            }
            match cfg.fusion {
                FusionKind::Adaptive => {
                    let k = cfg.compress_channels as u64;
                    for _ in 0..a {
                        n.conv(wt, k, 1, st);
                        if norm {
                            n.bn(k, st);
                        }
                        n.eltwise(k, st, 1);
                    }
                    n.conv(a * k, a, 1, st);
                    n.eltwise(a, st, 5);
                    n.eltwise(wt, st, 3 * a - 3);
                }
                FusionKind::Sum => n.eltwise(wt, st, a - 1),
                FusionKind::Concat => n.conv(a * wt, wt, 1, st),
            }
            for _ in 0..cfg.residual_units {
                for _ in 0..2 {
                    n.conv(wt, wt, 3, st);
                    if norm {
                        n.bn(wt, st);
                    }
                }
                n.eltwise(wt, st, 3);
            }
        }
    }
    let o = cfg.out_channels as u64;
    for (i, &l) in levels.iter().enumerate() {
        n.conv(width(i), o, 1, side(l));
    }
    if levels.len() == 4 {
        n.conv(o, o, 3, side(6));
        n.conv(o, o, 3, side(6));
    }
    n
}

pub fn hand_count_fpn(cfg: &NeckConfig, res: u64) -> Count {
    let mut n = Count::default();
    let levels: Vec<u64> = if cfg.backbone_channels.len() == 4 { vec![2, 3, 4, 5] } else { vec![3, 4, 5] };
    let side = |l: u64| res >> l;
    let o = cfg.out_channels as u64;
    for (i, &l) in levels.iter().enumerate() {
        n.conv(cfg.backbone_channels[i] as u64, o, 1, side(l));
        n.conv(o, o, 3, side(l));
    }
    for &l in &levels[..levels.len() - 1] {
        n.eltwise(o, side(l), 8 + 1);
    }
    if cfg.variant == Variant::Pafpn {
        for &l in &levels[1..] {
            n.conv(o, o, 3, side(l));
            n.eltwise(o, side(l), 1);
            n.conv(o, o, 3, side(l));
        }
    }
    if levels.len() == 4 {
        n.conv(o, o, 3, side(6));
        n.conv(o, o, 3, side(6));
    }
    n
}

