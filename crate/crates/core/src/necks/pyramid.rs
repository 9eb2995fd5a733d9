//! Multi-level feature maps keyed by pyramid level.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::necks::config::NeckConfig;
use crate::tensor::{Real, Shape, Tensor};
use crate::tsr;

/// Stride of level `l` in input pixels: 4 at level 2, doubling per level.
pub fn stride(level: u8) -> usize {
    1usize << level
}

/// Checks the halving rule across consecutive levels.
fn check_levels(shapes: &BTreeMap<u8, Shape>) -> Result<()> {
    let mut prev: Option<(u8, Shape)> = None;
    for (&l, &s) in shapes {
        if let Some((pl, ps)) = prev {
            if l != pl + 1 {
                return Err(shape_err!("pyramid levels must be consecutive, found {pl} then {l}"));
            }
            if ps.n != s.n {
                return Err(shape_err!("level {l} batch {} differs from level {pl} batch {}", s.n, ps.n));
            }
            if ps.h % 2 != 0 || ps.w % 2 != 0 || s.h != ps.h / 2 || s.w != ps.w / 2 {
                return Err(shape_err!(
                    "level {l} is {}x{} but must be half of level {pl} ({}x{})",
                    s.h,
                    s.w,
                    ps.h,
                    ps.w
                ));
            }
        }
        prev = Some((l, s));
    }
    Ok(())
}

/// Ordered level -> tensor map whose spatial dims halve per level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: BTreeMap<u8, Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: BTreeMap<u8, Tensor<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(shape_err!("a pyramid needs at least one level"));
        }
        if let Some((&l, _)) = levels.iter().find(|(&l, _)| !(2..=6).contains(&l)) {
            return Err(shape_err!("level {l} is outside 2..=6"));
        }
        let p = FeaturePyramid { levels };
        check_levels(&p.shapes())?;
        Ok(p)
    }

    pub fn get(&self, level: u8) -> Option<&Tensor<T>> {
        self.levels.get(&level)
    }

    pub fn levels(&self) -> Vec<u8> {
        self.levels.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &Tensor<T>)> {
        self.levels.iter().map(|(&l, t)| (l, t))
    }

    pub fn shapes(&self) -> BTreeMap<u8, Shape> {
        self.levels.iter().map(|(&l, t)| (l, t.shape())).collect()
    }

    pub fn into_map(self) -> BTreeMap<u8, Tensor<T>> {
        self.levels
    }

    /// Backbone-shaped pyramid `C_l` of standard-normal values for `config`.
    pub fn random_input(config: &NeckConfig, resolution: usize, batch: usize, rng: &mut impl Rng) -> Result<Self> {
        let shapes = input_shapes(config, resolution, batch)?;
        Self::new(shapes.into_iter().map(|(l, s)| (l, Tensor::randn(s, 1.0, rng))).collect())
    }

    /// Reads `{prefix}{l}.tsr` for each level.
    pub fn load(dir: impl AsRef<Path>, prefix: &str, levels: &[u8]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut map = BTreeMap::new();
        for &l in levels {
            let path = dir.join(format!("{prefix}{l}.tsr"));
            if !path.exists() {
                return Err(config_err!("missing level {prefix}{l}: {} not found", path.display()));
            }
            let t = tsr::read(&path).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                other => other,
            })?;
            map.insert(l, t.into_real());
        }
        Self::new(map)
    }

    /// Writes `{prefix}{l}.tsr` for each level.
    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (l, t) in self.iter() {
            tsr::write(dir.join(format!("{prefix}{l}.tsr")), t)?;
        }
        Ok(())
    }
}

/// Backbone output shapes for an image of `resolution x resolution`.
pub fn input_shapes(config: &NeckConfig, resolution: usize, batch: usize) -> Result<BTreeMap<u8, Shape>> {
    let coarsest = config.coarsest_stride();
    if resolution == 0 || !resolution.is_multiple_of(coarsest) {
        return Err(config_err!("resolution {resolution} must be a positive multiple of {coarsest}"));
    }
    Ok(config
        .input_levels()
        .into_iter()
        .zip(&config.backbone_channels)
        .map(|(l, &c)| {
            let side = resolution / stride(l);
            (l, Shape::new(batch, c, side, side))
        })
        .collect())
}
