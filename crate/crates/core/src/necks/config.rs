use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::fusion::FusionKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Four input levels C2..C5, outputs P2..P6.
    AfpnFrcnn,
    /// Three input levels C3..C5, outputs P3..P5.
    AfpnYolo,
    Fpn,
    Pafpn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AfpnFrcnn => "afpn_frcnn",
            Variant::AfpnYolo => "afpn_yolo",
            Variant::Fpn => "fpn",
            Variant::Pafpn => "pafpn",
        }
    }

    pub fn is_afpn(self) -> bool {
        matches!(self, Variant::AfpnFrcnn | Variant::AfpnYolo)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_residual_units() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_resolution() -> usize {
    640
}
fn default_compress() -> usize {
    8
}

/// Declarative neck description, read from and written to JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    pub variant: Variant,
    /// Backbone width per input level, finest level first.
    pub backbone_channels: Vec<usize>,
    /// Internal AFPN width of level `l` is `backbone_channels[l] / width_divisor`.
    pub width_divisor: usize,
    pub out_channels: usize,
    pub fusion: FusionKind,
    #[serde(default = "default_residual_units")]
    pub residual_units: usize,
    #[serde(default = "default_true")]
    pub norm: bool,
    #[serde(default)]
    pub seed: u64,
    /// Reference image size used for shape reports and random inputs.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Per-input width on the adaptive weight path.
    #[serde(default = "default_compress")]
    pub compress_channels: usize,
    #[serde(default)]
    pub align_corners: bool,
    /// Norm and ReLU after resampling convolutions.
    #[serde(default)]
    pub resample_norm_act: bool,
}

impl NeckConfig {
    /// Two-stage detector setting on ResNet-50 widths.
    pub fn afpn_frcnn() -> Self {
        NeckConfig {
            variant: Variant::AfpnFrcnn,
            backbone_channels: vec![256, 512, 1024, 2048],
            width_divisor: 8,
            out_channels: 256,
            fusion: FusionKind::Adaptive,
            residual_units: 4,
            norm: true,
            seed: 0,
            resolution: 640,
            compress_channels: 8,
            align_corners: false,
            resample_norm_act: false,
        }
    }

    /// One-stage detector setting on three levels.
    pub fn afpn_yolo() -> Self {
        NeckConfig {
            variant: Variant::AfpnYolo,
            backbone_channels: vec![256, 512, 1024],
            width_divisor: 4,
            ..Self::afpn_frcnn()
        }
    }

    pub fn fpn() -> Self {
        NeckConfig { variant: Variant::Fpn, ..Self::afpn_frcnn() }
    }

    pub fn pafpn() -> Self {
        NeckConfig { variant: Variant::Pafpn, ..Self::afpn_frcnn() }
    }

    /// Tiny four-level config for gradient checks and toy training.
    pub fn micro() -> Self {
        NeckConfig {
            backbone_channels: vec![16, 32, 64, 128],
            out_channels: 8,
            norm: false,
            resolution: 64,
            compress_channels: 4,
            ..Self::afpn_frcnn()
        }
    }

    /// Same topology at gradient-check scale: widths / 16, small heads, no norm,
    /// smallest valid resolution.
    pub fn to_micro(&self) -> Self {
        let mut c = NeckConfig {
            backbone_channels: self.backbone_channels.iter().map(|c| (c / 16).max(1)).collect(),
            out_channels: self.out_channels.min(8),
            compress_channels: self.compress_channels.min(4),
            norm: false,
            ..self.clone()
        };
        c.resolution = c.micro_resolution();
        c
    }

    /// True when the config is small enough for finite-difference checks.
    pub fn is_micro(&self) -> bool {
        self.resolution <= self.micro_resolution()
            && self.backbone_channels.iter().all(|&c| c <= 128)
            && self.out_channels <= 16
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        NeckConfig { variant, ..self.clone() }
    }

    pub fn with_fusion(&self, fusion: FusionKind) -> Self {
        NeckConfig { fusion, ..self.clone() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Input level indices, finest first.
    pub fn input_levels(&self) -> Vec<u8> {
        match self.backbone_channels.len() {
            4 => vec![2, 3, 4, 5],
            _ => vec![3, 4, 5],
        }
    }

    pub fn has_p6(&self) -> bool {
        self.backbone_channels.len() == 4
    }

    pub fn output_levels(&self) -> Vec<u8> {
        let mut levels = self.input_levels();
        if self.has_p6() {
            levels.push(6);
        }
        levels
    }

    /// Stride of the coarsest output; input resolutions must be a multiple of it.
    pub fn coarsest_stride(&self) -> usize {
        1 << self.output_levels().last().copied().unwrap_or(5)
    }

    /// Smallest valid resolution (coarsest output is 1x1).
    pub fn micro_resolution(&self) -> usize {
        self.coarsest_stride()
    }

    /// AFPN internal width per level.
    pub fn internal_widths(&self) -> Vec<usize> {
        self.backbone_channels.iter().map(|c| c / self.width_divisor.max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.backbone_channels.len();
        match self.variant {
            Variant::AfpnFrcnn if n != 4 => {
                return Err(config_err!("afpn_frcnn needs 4 backbone levels (C2..C5), got {n}"));
            }
            Variant::AfpnYolo if n != 3 => {
                return Err(config_err!("afpn_yolo needs 3 backbone levels (C3..C5), got {n}"));
            }
            Variant::Fpn | Variant::Pafpn if !(n == 3 || n == 4) => {
                return Err(config_err!("{} needs 3 or 4 backbone levels, got {n}", self.variant));
            }
            _ => {}
        }
        if self.backbone_channels.contains(&0) {
            return Err(config_err!("backbone_channels must all be >= 1"));
        }
        if self.width_divisor == 0 {
            return Err(config_err!("width_divisor must be >= 1"));
        }
        if self.variant.is_afpn() {
            for (l, c) in self.input_levels().iter().zip(&self.backbone_channels) {
                if c % self.width_divisor != 0 {
                    return Err(config_err!(
                        "C{l} width {c} is not divisible by width_divisor {}",
                        self.width_divisor
                    ));
                }
            }
        }
        if self.out_channels == 0 || self.compress_channels == 0 {
            return Err(config_err!("out_channels and compress_channels must be >= 1"));
        }
        let stride = self.coarsest_stride();
        if self.resolution == 0 || !self.resolution.is_multiple_of(stride) {
            return Err(config_err!(
                "resolution {} must be a positive multiple of the coarsest stride {stride}",
                self.resolution
            ));
        }
        Ok(())
    }
}
