//! Hierarchical convolutional image encoder.
//!
//! Three stages (patch embedding at stride 4, then two stride-2 downsamplings)
//! expose features at `R/4`, `R/8` and `R/16`. A separate full-resolution stem
//! provides the low-level feature consumed by mask refinement.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::ops::{self, gelu};
use crate::nn::{ChannelNorm, Conv2d, Scope};

/// Multi-scale encoder outputs.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `[B, C4, R/4, R/4]`
    pub f4: Tensor,
    /// `[B, C8, R/8, R/8]`
    pub f8: Tensor,
    /// `[B, C16, R/16, R/16]`, the highest-level feature.
    pub f16: Tensor,
    /// `[B, C_low, R, R]` when computed.
    pub low: Option<Tensor>,
}

impl FeaturePyramid {
    pub fn detach(&self) -> Self {
        Self {
            f4: self.f4.detach(),
            f8: self.f8.detach(),
            f16: self.f16.detach(),
            low: self.low.as_ref().map(|t| t.detach()),
        }
    }
}

/// Check an image batch `[B, 3, R, R]` with `R % 16 == 0`.
pub fn validate_images(images: &Tensor) -> Result<usize> {
    let (b, c, h, w) = images.dims4().map_err(|_| shape_err!("images must be rank 4, got {:?}", images.dims()))?;
    if b == 0 || c != 3 || h != w {
        return Err(shape_err!("images must be [B>=1, 3, R, R], got {:?}", images.dims()));
    }
    if h % 16 != 0 {
        return Err(shape_err!("image side {h} is not divisible by 16"));
    }
    ops::ensure_finite(images, "input images")?;
    Ok(h)
}

#[derive(Debug, Clone)]
struct ConvNormAct {
    conv: Conv2d,
    norm: ChannelNorm,
}

impl ConvNormAct {
    fn new(scope: &Scope, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(&scope.sub("conv"), cin, cout, k, stride, pad)?, norm: ChannelNorm::new(&scope.sub("norm"), cout)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        gelu(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvNormAct,
    block: ConvNormAct,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x)?;
        Ok((&x + self.block.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stages: [Stage; 3],
    resolution: usize,
}

impl ImageEncoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let stage = |name: &str, cin: usize, cout: usize, k: usize| -> Result<Stage> {
            let s = scope.sub(name);
            Ok(Stage {
                down: ConvNormAct::new(&s.sub("down"), cin, cout, k, k, 0)?,
                block: ConvNormAct::new(&s.sub("block"), cout, cout, 3, 1, 1)?,
            })
        };
        Ok(Self {
            stages: [stage("stage1", 3, cfg.c4, 4)?, stage("stage2", cfg.c4, cfg.c8, 2)?, stage("stage3", cfg.c8, cfg.c16, 2)?],
            resolution: cfg.resolution,
        })
    }

    /// Encode `[B, 3, R, R]` into the `R/4`, `R/8`, `R/16` pyramid.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let r = validate_images(images)?;
        if r != self.resolution {
            return Err(shape_err!("encoder built for R={}, got R={r}", self.resolution));
        }
        let f4 = self.stages[0].forward(images)?;
        let f8 = self.stages[1].forward(&f4)?;
        let f16 = self.stages[2].forward(&f8)?;
        Ok(FeaturePyramid { f4, f8, f16, low: None })
    }
}

/// Full-resolution low-level feature extractor.
#[derive(Debug, Clone)]
pub struct LowLevelStem {
    conv: Conv2d,
}

impl LowLevelStem {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(&scope.sub("conv"), 3, cfg.c_low, 3, 1, 1)? })
    }

    /// `[B, 3, R, R]` -> `[B, C_low, R, R]`
    pub fn stem_lowlevel(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != w {
            return Err(shape_err!("stem expects [B, 3, R, R], got {:?}", images.dims()));
        }
        if h == 0 {
            return Err(Error::Empty("image"));
        }
        gelu(&self.conv.forward(images)?)
    }
}
