//! UNet-style cascade that lifts the object embedding to full-resolution logits.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::encoder::{FeaturePyramid, LowLevelStem};
use crate::error::{shape_err, Result};
use crate::nn::ops::{self, gelu};
use crate::nn::{ChannelNorm, Conv2d, ConvTranspose2d, Scope};

/// Concatenate, 3x3 conv, GELU, layer norm, then an optional x2 bilinear upsample.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    conv: Conv2d,
    norm: ChannelNorm,
}

impl DecoderBlock {
    pub fn new(scope: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(&scope.sub("conv"), cin, cout, 3, 1, 1)?, norm: ChannelNorm::new(&scope.sub("norm"), cout)? })
    }

    pub fn forward(&self, current: &Tensor, skip: &Tensor, upsample_after: bool) -> Result<Tensor> {
        let (_, _, h, w) = current.dims4()?;
        let (_, _, sh, sw) = skip.dims4()?;
        if (h, w) != (sh, sw) {
            return Err(shape_err!("decoder block: current {:?} and skip {:?} differ spatially", current.dims(), skip.dims()));
        }
        let x = self.norm.forward(&gelu(&self.conv.forward(&Tensor::cat(&[current, skip], 1)?)?)?)?;
        if upsample_after {
            ops::resize_bilinear(&x, 2 * h, 2 * w)
        } else {
            Ok(x)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementOutputs {
    /// `[B, 1, R, R]`
    pub final_logits: Tensor,
    /// One logit map per decoder block, at `R/8`, `R/4`, `R/4`.
    pub intermediates: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MaskRefinement {
    pub stem: LowLevelStem,
    blocks: [DecoderBlock; 3],
    heads: [Conv2d; 3],
    lift1: ConvTranspose2d,
    lift2: ConvTranspose2d,
    align: Conv2d,
    out: Conv2d,
    resolution: usize,
}

impl MaskRefinement {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let [r0, r1, r2] = cfg.refine_channels;
        let head = |i: usize, c: usize| Conv2d::new(&scope.sub(&format!("head{i}")), c, 1, 1, 1, 0);
        Ok(Self {
            stem: LowLevelStem::new(&scope.sub("stem"), cfg)?,
            blocks: [
                DecoderBlock::new(&scope.sub("block1"), cfg.c_embed + cfg.c16, r0)?,
                DecoderBlock::new(&scope.sub("block2"), r0 + cfg.c8, r1)?,
                DecoderBlock::new(&scope.sub("block3"), r1 + cfg.c4 + 1, r2)?,
            ],
            heads: [head(1, r0)?, head(2, r1)?, head(3, r2)?],
            lift1: ConvTranspose2d::new(&scope.sub("lift1"), r2, cfg.c_low, 2, 2)?,
            lift2: ConvTranspose2d::new(&scope.sub("lift2"), cfg.c_low, cfg.c_low, 2, 2)?,
            align: Conv2d::new(&scope.sub("align"), cfg.c_low, cfg.c_low, 1, 1, 0)?,
            out: Conv2d::new(&scope.sub("out"), cfg.c_low, 1, 3, 1, 1)?,
            resolution: cfg.resolution,
        })
    }

    /// Fuse the embedding with the pyramid and emit full-resolution logits.
    ///
    /// `selected_prob` is the `[B, 1, R/4, R/4]` probability of the selected
    /// decoder candidate; it joins the `R/4` skip. `low` is the stem feature
    /// `[B, C_low, R, R]`.
    pub fn refine_forward(
        &self,
        renewed: &Tensor,
        pyramid: &FeaturePyramid,
        selected_prob: &Tensor,
        low: &Tensor,
    ) -> Result<RefinementOutputs> {
        let r = self.resolution;
        if low.dims4()?.2 != r || selected_prob.dims4()?.2 != r / 4 {
            return Err(shape_err!(
                "refinement at R={r}: low-level {:?}, selected mask {:?}",
                low.dims(),
                selected_prob.dims()
            ));
        }
        let x1 = self.blocks[0].forward(renewed, &pyramid.f16, true)?;
        let x2 = self.blocks[1].forward(&x1, &pyramid.f8, true)?;
        let skip3 = Tensor::cat(&[&pyramid.f4, selected_prob], 1)?;
        let x3 = self.blocks[2].forward(&x2, &skip3, false)?;
        let intermediates = vec![self.heads[0].forward(&x1)?, self.heads[1].forward(&x2)?, self.heads[2].forward(&x3)?];
        let up = gelu(&self.lift1.forward(&x3)?)?;
        let up = self.lift2.forward(&up)?;
        let fused = gelu(&(up + self.align.forward(low)?)?)?;
        Ok(RefinementOutputs { final_logits: self.out.forward(&fused)?, intermediates })
    }
}
