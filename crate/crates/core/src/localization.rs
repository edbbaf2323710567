//! Localization augment: refine the global feature with local detail.
//!
//! The image is cut into four quadrants, each upsampled back to full size and
//! encoded. The four `R/16` sub-features are tiled into an `R/8` local feature,
//! average-pooled at several granularities, tokenized, and attended to by the
//! global tokens. A residual keeps the global feature intact when the
//! attention update is zero.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::encoder::{validate_images, FeaturePyramid, ImageEncoder};
use crate::error::{shape_err, Error, Result};
use crate::nn::ops::{self, avg_pool, detokenize_grid, resize_bilinear, tokenize_grid};
use crate::nn::{grid_encoding, Attention, AttentionTrace, Scope, TokenNorm};

/// Grid cells of the quadrants in row-major order.
pub const QUADRANTS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

#[derive(Debug, Clone)]
pub struct SubImageBatch {
    /// `[4, B, 3, R, R]`
    pub subs: Tensor,
    pub positions: [(usize, usize); 4],
}

/// Crop `[B, 3, R, R]` into four quadrants, each bilinearly resized to `R x R`.
pub fn crop_subimages(images: &Tensor) -> Result<SubImageBatch> {
    let (_, _, h, w) = images.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("cannot split an odd-sided image {h}x{w} into quadrants"));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut tiles = Vec::with_capacity(4);
    for &(r, c) in &QUADRANTS {
        let tile = images.narrow(2, r * hh, hh)?.narrow(3, c * hw, hw)?;
        tiles.push(resize_bilinear(&tile, h, w)?);
    }
    Ok(SubImageBatch { subs: Tensor::stack(&tiles, 0)?, positions: QUADRANTS })
}

/// Tile four `[B, C, h, w]` sub-features into one `[B, C, 2h, 2w]` mosaic by position.
pub fn assemble_local_feature(sub_features: &Tensor, positions: &[(usize, usize)]) -> Result<Tensor> {
    let n = sub_features.dim(0)?;
    if n != 4 || positions.len() != 4 {
        return Err(shape_err!("expected exactly 4 sub-features and positions, got {n} and {}", positions.len()));
    }
    let mut grid: [[Option<Tensor>; 2]; 2] = Default::default();
    for (i, &(r, c)) in positions.iter().enumerate() {
        if r > 1 || c > 1 {
            return Err(shape_err!("position {:?} outside the 2x2 grid", (r, c)));
        }
        if grid[r][c].is_some() {
            return Err(Error::PositionCollision((r, c)));
        }
        grid[r][c] = Some(sub_features.get(i)?);
    }
    let take = |r: usize, c: usize| grid[r][c].clone().expect("4 distinct positions fill the grid");
    let top = Tensor::cat(&[take(0, 0), take(0, 1)], 3)?;
    let bottom = Tensor::cat(&[take(1, 0), take(1, 1)], 3)?;
    Ok(Tensor::cat(&[top, bottom], 2)?)
}

/// Non-overlapping average pooling of `l` at each kernel size.
pub fn multi_granularity_pool(l: &Tensor, kernels: &[usize]) -> Result<Vec<Tensor>> {
    kernels.iter().map(|&k| avg_pool(l, k)).collect()
}

/// Token count of the pooled local sequence for a local feature of side `side`.
pub fn local_token_count(side: usize, kernels: &[usize]) -> usize {
    kernels.iter().map(|&k| (side / k) * (side / k)).sum()
}

/// Every intermediate of the global/local pathway.
#[derive(Debug, Clone)]
pub struct GlobalLocalFeatures {
    /// Global feature `[B, C, R/16, R/16]`.
    pub global: Tensor,
    /// Assembled local feature `[B, C, R/8, R/8]`.
    pub local: Tensor,
    pub pooled: Vec<Tensor>,
    /// `[B, T_L, C]`
    pub local_tokens: Tensor,
    /// `[B, T_G, C]`
    pub global_tokens: Tensor,
    /// Positional encodings matching the token sequences, `[1, T, C]`.
    pub local_pe: Tensor,
    pub global_pe: Tensor,
}

impl GlobalLocalFeatures {
    pub fn build(global: &Tensor, local: &Tensor, kernels: &[usize]) -> Result<Self> {
        let (_, c, gh, gw) = global.dims4()?;
        let (_, lc, lh, lw) = local.dims4()?;
        if lc != c || lh != 2 * gh || lw != 2 * gw {
            return Err(shape_err!("local feature {:?} must be twice the global side {:?}", local.dims(), global.dims()));
        }
        let pooled = multi_granularity_pool(local, kernels)?;
        let mut toks = Vec::with_capacity(pooled.len());
        let mut pes = Vec::with_capacity(pooled.len());
        for p in &pooled {
            let (_, _, h, w) = p.dims4()?;
            toks.push(tokenize_grid(p)?);
            pes.push(grid_encoding(h, w, c, p.dtype(), p.device())?);
        }
        Ok(Self {
            global: global.clone(),
            local: local.clone(),
            local_tokens: Tensor::cat(&toks, 1)?,
            local_pe: Tensor::cat(&pes, 1)?,
            global_tokens: tokenize_grid(global)?,
            global_pe: grid_encoding(gh, gw, c, global.dtype(), global.device())?,
            pooled,
        })
    }
}

/// Refined global feature, same shape as the input global feature.
#[derive(Debug, Clone)]
pub struct RefinedGlobal {
    pub refined: Tensor,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone)]
pub struct LocalizationAugment {
    norm_q: TokenNorm,
    norm_kv: TokenNorm,
    attn: Attention,
    kernels: Vec<usize>,
    channels: usize,
}

impl LocalizationAugment {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            norm_q: TokenNorm::new(&scope.sub("norm_q"), cfg.c16)?,
            norm_kv: TokenNorm::new(&scope.sub("norm_kv"), cfg.c16)?,
            attn: Attention::zero_output(&scope.sub("cross_attn"), cfg.c16, cfg.c16, cfg.heads, 1)?,
            kernels: cfg.pool_kernels.clone(),
            channels: cfg.c16,
        })
    }

    pub fn attention(&self) -> &Attention {
        &self.attn
    }

    /// Global-local cross-attention on token sequences. Queries come from the
    /// global tokens, keys and values from the local tokens; encodings, when
    /// given, are added to queries and keys. Returns updated global tokens.
    pub fn cross_attend_tokens(
        &self,
        global_tokens: &Tensor,
        local_tokens: &Tensor,
        pe: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Tensor, AttentionTrace)> {
        let cg = global_tokens.dim(2)?;
        let cl = local_tokens.dim(2)?;
        if cg != self.channels || cl != self.channels {
            return Err(shape_err!("token widths {cg}/{cl} do not match C16={}", self.channels));
        }
        let q = self.norm_q.forward(global_tokens)?;
        let kv = self.norm_kv.forward(local_tokens)?;
        let (q_in, k_in) = match pe {
            Some((gpe, lpe)) => (q.broadcast_add(gpe)?, kv.broadcast_add(lpe)?),
            None => (q, kv.clone()),
        };
        let trace = self.attn.trace(&q_in, &k_in, &kv)?;
        Ok(((global_tokens + &trace.output)?, trace))
    }

    /// Refine the global feature with the prepared local features.
    pub fn cross_attend_global_local(&self, feats: &GlobalLocalFeatures, pos_enc: bool) -> Result<RefinedGlobal> {
        let pe = pos_enc.then_some((&feats.global_pe, &feats.local_pe));
        let (tokens, trace) = self.cross_attend_tokens(&feats.global_tokens, &feats.local_tokens, pe)?;
        let (_, _, h, w) = feats.global.dims4()?;
        Ok(RefinedGlobal { refined: detokenize_grid(&tokens, h, w)?, trace })
    }

    /// Refine `global` from already-encoded sub-image features `[4, B, C, h, w]`.
    pub fn refine(&self, global: &Tensor, sub_features: &Tensor, positions: &[(usize, usize)]) -> Result<RefinedGlobal> {
        let local = assemble_local_feature(sub_features, positions)?;
        let feats = GlobalLocalFeatures::build(global, &local, &self.kernels)?;
        self.cross_attend_global_local(&feats, true)
    }

    /// Encode the sub-images of `images` as one `4B` batch: `[4, B, C16, R/16, R/16]`.
    pub fn encode_subimages(encoder: &ImageEncoder, images: &Tensor) -> Result<(Tensor, [(usize, usize); 4])> {
        let crops = crop_subimages(images)?;
        let (n, b, c, h, w) = crops.subs.dims5()?;
        let batch = crops.subs.reshape((n * b, c, h, w))?;
        let f16 = encoder.encode(&batch)?.f16;
        let (_, fc, fh, fw) = f16.dims4()?;
        Ok((f16.reshape((n, b, fc, fh, fw))?, crops.positions))
    }

    /// Full pathway: crop, encode, assemble, pool, tokenize, cross-attend.
    pub fn la_forward(&self, images: &Tensor, encoder: &ImageEncoder) -> Result<(RefinedGlobal, FeaturePyramid)> {
        validate_images(images)?;
        let pyramid = encoder.encode(images)?;
        let (subs, positions) = Self::encode_subimages(encoder, images)?;
        let refined = self.refine(&pyramid.f16, &subs, &positions)?;
        ops::ensure_finite(&refined.refined, "refined global feature")?;
        Ok((refined, pyramid))
    }
}
