//! Small strided residual encoder producing stride-8 features.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, relu, relu_backward, Conv2d, ConvCache, Param, Parameterized};
use crate::tensor::{add_assign4, Real};

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Widths of the stride-2 and stride-4 stages; the stride-8 stage
    /// always has `feature_dim` channels.
    pub widths: [usize; 2],
    /// Residual blocks per stage.
    pub depth: usize,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: [16, 32], depth: 1, feature_dim: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.feature_dim == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the features for an input of the given size.
    pub fn output_size(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(OUTPUT_STRIDE), w.div_ceil(OUTPUT_STRIDE))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    c1: ConvCache<T>,
    a1: Array4<T>,
    c2: ConvCache<T>,
    out: Array4<T>,
}

impl<T: Real> ResidualBlock<T> {
    fn new<R: Rng>(ch: usize, rng: &mut R) -> Self {
        let fan_in = (ch * 9) as f64;
        Self {
            conv1: Conv2d::new(ch, ch, 3, 1, 1, rng),
            conv2: Conv2d::with_bound(ch, ch, 3, 1, 1, 0.5 * (6.0 / fan_in).sqrt(), rng),
        }
    }

    fn forward(&self, x: &Array4<T>) -> (Array4<T>, BlockCache<T>) {
        let (h1, c1) = self.conv1.forward(x);
        let a1 = relu(&h1);
        let (mut h2, c2) = self.conv2.forward(&a1);
        add_assign4(&mut h2, x);
        let out = relu(&h2);
        (out.clone(), BlockCache { c1, a1, c2, out })
    }

    fn backward(&mut self, cache: &BlockCache<T>, dy: &Array4<T>) -> Array4<T> {
        let dsum = relu_backward(&cache.out, dy);
        let da1 = self.conv2.backward(&cache.c2, &dsum, true).expect("input grad");
        let dh1 = relu_backward(&cache.a1, &da1);
        let mut dx = self.conv1.backward(&cache.c1, &dh1, true).expect("input grad");
        add_assign4(&mut dx, &dsum);
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage<T> {
    down: Conv2d<T>,
    blocks: Vec<ResidualBlock<T>>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    down: ConvCache<T>,
    down_out: Array4<T>,
    blocks: Vec<BlockCache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    stages: Vec<Stage<T>>,
    config: BackboneConfig,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    stages: Vec<StageCache<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let chans = [3, config.widths[0], config.widths[1], config.feature_dim];
        let stages = (0..3)
            .map(|i| Stage {
                down: Conv2d::new(chans[i], chans[i + 1], 3, 2, 1, rng),
                blocks: (0..config.depth).map(|_| ResidualBlock::new(chans[i + 1], rng)).collect(),
            })
            .collect();
        Self { stages, config: config.clone() }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[B, 3, H, W]` images (H, W multiples of 8) to `[B, Z, H/8, W/8]`.
    pub fn forward(&self, images: &Array4<T>) -> (Array4<T>, BackboneCache<T>) {
        let mut x = images.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (h, down) = stage.down.forward(&x);
            let down_out = relu(&h);
            x = down_out.clone();
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward(&x);
                x = y;
                blocks.push(c);
            }
            caches.push(StageCache { down, down_out, blocks });
        }
        (x, BackboneCache { stages: caches })
    }

    /// Accumulates parameter gradients. The image gradient is not needed.
    pub fn backward(&mut self, cache: &BackboneCache<T>, dfeatures: &Array4<T>) {
        let mut dy = dfeatures.clone();
        let n = self.stages.len();
        for (si, (stage, sc)) in self.stages.iter_mut().zip(&cache.stages).enumerate().rev() {
            for (block, bc) in stage.blocks.iter_mut().zip(&sc.blocks).rev() {
                dy = block.backward(bc, &dy);
            }
            let dh = relu_backward(&sc.down_out, &dy);
            match stage.down.backward(&sc.down, &dh, si > 0) {
                Some(dx) => dy = dx,
                None => debug_assert_eq!(si, 0, "only the stem skips its input gradient ({n} stages)"),
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: s.down.cast(),
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| ResidualBlock { conv1: b.conv1.cast(), conv2: b.conv2.cast() })
                        .collect(),
                })
                .collect(),
            config: self.config.clone(),
        }
    }
}

impl<T: Real> Parameterized<T> for Backbone<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(prefixed(&format!("stage{i}.down"), s.down.params()));
            for (j, b) in s.blocks.iter().enumerate() {
                out.extend(prefixed(&format!("stage{i}.block{j}.conv1"), b.conv1.params()));
                out.extend(prefixed(&format!("stage{i}.block{j}.conv2"), b.conv2.params()));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("stage{i}.down"), s.down.params_mut()));
            for (j, b) in s.blocks.iter_mut().enumerate() {
                out.extend(prefixed_mut(&format!("stage{i}.block{j}.conv1"), b.conv1.params_mut()));
                out.extend(prefixed_mut(&format!("stage{i}.block{j}.conv2"), b.conv2.params_mut()));
            }
        }
        out
    }
}
