//! Prompt retargeting: multi-branch embedding augmentation, dense prompt
//! rasterization and encoding, and the token/embedding attention block.

use candle_core::Tensor;

use crate::base_model::{Point, PointLabel};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::ops::{self, gelu, sigmoid};
use crate::nn::{grid_encoding, Attention, AttentionTrace, ChannelNorm, Conv2d, Init, Mlp, Scope, TokenNorm};

#[derive(Debug, Clone)]
struct RfbBranch {
    reduce: Conv2d,
    horizontal: Conv2d,
    vertical: Conv2d,
}

impl RfbBranch {
    fn new(scope: &Scope, c: usize, mid: usize, n: usize) -> Result<Self> {
        let uniform = |fan_in| Init::Uniform { fan_in };
        Ok(Self {
            reduce: Conv2d::new(&scope.sub("reduce"), c, mid, 1, 1, 0)?,
            horizontal: Conv2d::rect(&scope.sub("h"), mid, mid, (1, n), (1, 1), (0, n / 2), uniform(mid * n))?,
            vertical: Conv2d::rect(&scope.sub("v"), mid, mid, (n, 1), (1, 1), (n / 2, 0), uniform(mid * n))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.reduce.forward(x)?)?;
        let h = gelu(&self.horizontal.forward(&h)?)?;
        self.vertical.forward(&h)
    }
}

/// Multi-branch receptive-field block with a 1x1 shortcut.
#[derive(Debug, Clone)]
pub struct RfbBlock {
    branches: Vec<RfbBranch>,
    fuse: Conv2d,
    shortcut: Conv2d,
    channels: usize,
}

impl RfbBlock {
    pub fn new(scope: &Scope, channels: usize, kernels: &[usize]) -> Result<Self> {
        let mid = (channels / 4).max(1);
        let branches = kernels
            .iter()
            .map(|&n| RfbBranch::new(&scope.sub(&format!("branch{n}")), channels, mid, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fuse: Conv2d::with_init(&scope.sub("fuse"), mid * kernels.len(), channels, 1, 1, 0, Init::Zeros)?,
            shortcut: Conv2d::with_init(&scope.sub("shortcut"), channels, channels, 1, 1, 0, Init::Identity)?,
            branches,
            channels,
        })
    }

    pub fn rfb_augment(&self, e: &Tensor) -> Result<Tensor> {
        let c = e.dim(1)?;
        if c != self.channels {
            return Err(shape_err!("rfb: expected {} channels, got {c}", self.channels));
        }
        let outs = self.branches.iter().map(|b| b.forward(e)).collect::<Result<Vec<_>>>()?;
        let fused = self.fuse.forward(&Tensor::cat(&outs, 1)?)?;
        Ok((self.shortcut.forward(e)? + fused)?)
    }
}

/// Binary click channels `[2, D, D]` (positive, negative) as flat data.
///
/// Click centers map from image space by `floor(v * D / R)`; a pixel is set
/// when its squared distance to the center is at most `r^2`.
pub fn rasterize_clicks(points: &[Point], d: usize, image_side: usize, radius: usize) -> Vec<f32> {
    let mut out = vec![0f32; 2 * d * d];
    let r = radius as i64;
    for p in points {
        let cx = ((p.x * d as f64 / image_side as f64).floor() as i64).clamp(0, d as i64 - 1);
        let cy = ((p.y * d as f64 / image_side as f64).floor() as i64).clamp(0, d as i64 - 1);
        let ch = if p.label == PointLabel::Positive { 0 } else { 1 };
        for y in (cy - r).max(0)..=(cy + r).min(d as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(d as i64 - 1) {
                let (dx, dy) = (x - cx, y - cy);
                if dx * dx + dy * dy <= r * r {
                    out[(ch * d + y as usize) * d + x as usize] = 1.0;
                }
            }
        }
    }
    out
}

/// Three-channel dense prompt map `[1, 3, D, D]`: positive clicks, negative
/// clicks, and the sigmoid of the selected candidate logits.
pub fn rasterize_dense_prompt(points: &[Point], selected_logits: &Tensor, image_side: usize, radius: usize) -> Result<Tensor> {
    let (b, c, h, w) = selected_logits.dims4()?;
    if b != 1 || c != 1 || h != w {
        return Err(shape_err!("selected mask must be [1, 1, D, D], got {:?}", selected_logits.dims()));
    }
    let clicks = rasterize_clicks(points, h, image_side, radius);
    let clicks = Tensor::from_vec(clicks, (1, 2, h, w), selected_logits.device())?.to_dtype(selected_logits.dtype())?;
    Ok(Tensor::cat(&[&clicks, &sigmoid(selected_logits)?], 1)?)
}

/// Two stride-2 2x2 convolutions with GELU and layer norm, then a 1x1 projection.
#[derive(Debug, Clone)]
pub struct DensePromptEncoder {
    down1: Conv2d,
    norm1: ChannelNorm,
    down2: Conv2d,
    norm2: ChannelNorm,
    proj: Conv2d,
    side: usize,
}

impl DensePromptEncoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.c_embed;
        let mid = (c / 4).max(1);
        Ok(Self {
            down1: Conv2d::new(&scope.sub("down1"), 3, mid, 2, 2, 0)?,
            norm1: ChannelNorm::new(&scope.sub("norm1"), mid)?,
            down2: Conv2d::new(&scope.sub("down2"), mid, c, 2, 2, 0)?,
            norm2: ChannelNorm::new(&scope.sub("norm2"), c)?,
            proj: Conv2d::with_init(&scope.sub("proj"), c, c, 1, 1, 0, Init::Zeros)?,
            side: cfg.dense_side(),
        })
    }

    pub fn encode_dense_prompt(&self, map: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = map.dims4()?;
        if c != 3 || h != self.side || w != self.side {
            return Err(shape_err!("dense prompt map must be [B, 3, {0}, {0}], got {1:?}", self.side, map.dims()));
        }
        let x = self.norm1.forward(&gelu(&self.down1.forward(map)?)?)?;
        let x = self.norm2.forward(&gelu(&self.down2.forward(&x)?)?)?;
        self.proj.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedEmbedding {
    pub e_a: Tensor,
    pub e_p: Tensor,
    pub e_ap: Tensor,
}

/// The four-step attention that renews the embedding from the prompt tokens.
///
/// Steps 1-3 update the tokens with post-norm residuals. Step 4 writes back
/// into the embedding through a zero-initialized projection, so an untrained
/// block leaves the embedding unchanged.
#[derive(Debug, Clone)]
pub struct Retargeter {
    self_attn: Attention,
    norm1: TokenNorm,
    cross_t2e: Attention,
    norm2: TokenNorm,
    mlp: Mlp,
    norm3: TokenNorm,
    norm_e: TokenNorm,
    cross_e2t: Attention,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct RetargetTrace {
    pub renewed: Tensor,
    pub tokens: Tensor,
    pub attention: Vec<AttentionTrace>,
}

impl Retargeter {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.c_embed;
        Ok(Self {
            self_attn: Attention::new(&scope.sub("self_attn"), c, c, cfg.heads, 1)?,
            norm1: TokenNorm::new(&scope.sub("norm1"), c)?,
            cross_t2e: Attention::new(&scope.sub("cross_t2e"), c, c, cfg.heads, 2)?,
            norm2: TokenNorm::new(&scope.sub("norm2"), c)?,
            mlp: Mlp::new(&scope.sub("mlp"), c, 2 * c, c)?,
            norm3: TokenNorm::new(&scope.sub("norm3"), c)?,
            norm_e: TokenNorm::new(&scope.sub("norm_e"), c)?,
            cross_e2t: Attention::zero_output(&scope.sub("cross_e2t"), c, c, cfg.heads, 2)?,
            channels: c,
        })
    }

    pub fn trace(&self, e_ap: &Tensor, sparse_tokens: &Tensor, output_token: &Tensor) -> Result<RetargetTrace> {
        let (b, c, h, w) = e_ap.dims4()?;
        if c != self.channels || sparse_tokens.dim(2)? != c || output_token.dim(2)? != c {
            return Err(shape_err!(
                "retarget: embedding {:?}, sparse {:?}, output token {:?} must share C_e={}",
                e_ap.dims(),
                sparse_tokens.dims(),
                output_token.dims(),
                self.channels
            ));
        }
        if sparse_tokens.dim(0)? != b || output_token.dim(0)? != b {
            return Err(shape_err!("retarget: batch mismatch"));
        }
        let t = if sparse_tokens.dim(1)? == 0 {
            output_token.clone()
        } else {
            Tensor::cat(&[output_token, sparse_tokens], 1)?
        };
        let e = ops::tokenize_grid(e_ap)?;
        let pe = grid_encoding(h, w, c, e_ap.dtype(), e_ap.device())?;
        let e_keys = e.broadcast_add(&pe)?;
        let mut attention = Vec::with_capacity(3);

        let a = self.self_attn.trace(&t, &t, &t)?;
        let t = self.norm1.forward(&(&t + &a.output)?)?;
        attention.push(a);
        let a = self.cross_t2e.trace(&t, &e_keys, &e)?;
        let t = self.norm2.forward(&(&t + &a.output)?)?;
        attention.push(a);
        let t = self.norm3.forward(&(&t + self.mlp.forward(&t)?)?)?;
        let q = self.norm_e.forward(&e)?.broadcast_add(&pe)?;
        let a = self.cross_e2t.trace(&q, &t, &t)?;
        let e = (e + &a.output)?;
        attention.push(a);
        Ok(RetargetTrace { renewed: ops::detokenize_grid(&e, h, w)?, tokens: t, attention })
    }

    pub fn retarget(&self, e_ap: &Tensor, sparse_tokens: &Tensor, output_token: &Tensor) -> Result<Tensor> {
        Ok(self.trace(e_ap, sparse_tokens, output_token)?.renewed)
    }
}

/// All prompt-retargeting parameters.
#[derive(Debug, Clone)]
pub struct PromptRetargeting {
    pub rfb: RfbBlock,
    pub dense: DensePromptEncoder,
    pub retargeter: Retargeter,
    radius: usize,
    resolution: usize,
}

impl PromptRetargeting {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            rfb: RfbBlock::new(&scope.sub("rfb"), cfg.c_embed, &cfg.rfb_kernels)?,
            dense: DensePromptEncoder::new(&scope.sub("dense"), cfg)?,
            retargeter: Retargeter::new(&scope.sub("retarget"), cfg)?,
            radius: cfg.click_radius(),
            resolution: cfg.resolution,
        })
    }

    pub fn augment(&self, embedding: &Tensor, points: &[Point], selected_logits: &Tensor) -> Result<AugmentedEmbedding> {
        let e_a = self.rfb.rfb_augment(embedding)?;
        let map = rasterize_dense_prompt(points, selected_logits, self.resolution, self.radius)?;
        let e_p = self.dense.encode_dense_prompt(&map)?;
        let e_ap = (&e_a + &e_p)?;
        Ok(AugmentedEmbedding { e_a, e_p, e_ap })
    }

    /// Renewed embedding `[1, C_e, R/16, R/16]`.
    pub fn forward(
        &self,
        embedding: &Tensor,
        points: &[Point],
        selected_logits: &Tensor,
        sparse_tokens: &Tensor,
        output_token: &Tensor,
    ) -> Result<Tensor> {
        let aug = self.augment(embedding, points, selected_logits)?;
        self.retargeter.retarget(&aug.e_ap, sparse_tokens, output_token)
    }
}
