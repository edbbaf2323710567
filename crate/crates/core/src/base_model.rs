//! Prompt encoder and two-way mask decoder of the frozen baseline.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::ops::{self, gelu, sigmoid};
use crate::nn::{
    grid_encoding, sinusoidal_2d, Attention, ChannelNorm, Conv2d, ConvTranspose2d, Init, Linear, Mlp, Scope,
    TokenNorm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

impl Point {
    pub fn positive(x: f64, y: f64) -> Self {
        Self { x, y, label: PointLabel::Positive }
    }

    pub fn negative(x: f64, y: f64) -> Self {
        Self { x, y, label: PointLabel::Negative }
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Square soft mask in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub side: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub points: Vec<Point>,
    #[serde(default, rename = "box")]
    pub bbox: Option<BoxPrompt>,
    #[serde(default)]
    pub coarse_mask: Option<MaskGrid>,
}

impl PromptSet {
    pub fn from_points(points: Vec<Point>) -> Self {
        Self { points, ..Default::default() }
    }

    pub fn from_box(b: BoxPrompt) -> Self {
        Self { bbox: Some(b), ..Default::default() }
    }

    pub fn from_mask(m: MaskGrid) -> Self {
        Self { coarse_mask: Some(m), ..Default::default() }
    }

    /// Number of sparse tokens this prompt encodes to.
    pub fn sparse_count(&self) -> usize {
        self.points.len() + if self.bbox.is_some() { 2 } else { 0 }
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        let r = resolution as f64;
        if self.points.is_empty() && self.bbox.is_none() && self.coarse_mask.is_none() {
            return Err(Error::Prompt("at least one prompt is required".into()));
        }
        for p in &self.points {
            if !(p.x >= 0.0 && p.x < r && p.y >= 0.0 && p.y < r) {
                return Err(Error::Prompt(format!("point ({}, {}) outside [0, {resolution})", p.x, p.y)));
            }
        }
        if let Some(b) = &self.bbox {
            let inside = |v: f64| (0.0..=r).contains(&v);
            if !(inside(b.x0) && inside(b.x1) && inside(b.y0) && inside(b.y1)) {
                return Err(Error::Prompt(format!("box {b:?} outside the image")));
            }
            if !(b.x0 < b.x1 && b.y0 < b.y1) {
                return Err(Error::Prompt(format!("box {b:?} is empty")));
            }
        }
        if let Some(m) = &self.coarse_mask {
            if m.side != resolution / 4 || m.data.len() != m.side * m.side {
                return Err(Error::Prompt(format!("coarse mask must be {0}x{0}", resolution / 4)));
            }
            if m.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Prompt("coarse mask values must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Learned embeddings for each sparse token role.
const LABEL_POSITIVE: usize = 0;
const LABEL_NEGATIVE: usize = 1;
const LABEL_BOX_TL: usize = 2;
const LABEL_BOX_BR: usize = 3;

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    labels: Tensor,
    no_mask: Tensor,
    down1: Conv2d,
    norm1: ChannelNorm,
    down2: Conv2d,
    norm2: ChannelNorm,
    proj: Conv2d,
    c_embed: usize,
    resolution: usize,
}

impl PromptEncoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let ce = cfg.c_embed;
        let (c1, c2) = ((ce / 16).max(1), (ce / 4).max(1));
        Ok(Self {
            labels: scope.tensor("labels", &[4, ce], Init::Normal { std: 1.0 })?,
            no_mask: scope.tensor("no_mask", &[ce], Init::Normal { std: 0.1 })?,
            down1: Conv2d::new(&scope.sub("mask_down1"), 1, c1, 2, 2, 0)?,
            norm1: ChannelNorm::new(&scope.sub("mask_norm1"), c1)?,
            down2: Conv2d::new(&scope.sub("mask_down2"), c1, c2, 2, 2, 0)?,
            norm2: ChannelNorm::new(&scope.sub("mask_norm2"), c2)?,
            proj: Conv2d::new(&scope.sub("mask_proj"), c2, ce, 1, 1, 0)?,
            c_embed: ce,
            resolution: cfg.resolution,
        })
    }

    fn label(&self, i: usize) -> Result<Tensor> {
        Ok(self.labels.narrow(0, i, 1)?)
    }

    /// `(sparse [1, N_s, C_e], dense [1, C_e, R/16, R/16])`
    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<(Tensor, Tensor)> {
        prompts.validate(self.resolution)?;
        let r = self.resolution as f64;
        let dev = self.labels.device();
        let dt = self.labels.dtype();
        let mut coords = Vec::new();
        let mut roles = Vec::new();
        for p in &prompts.points {
            coords.push(((p.x + 0.5) / r, (p.y + 0.5) / r));
            roles.push(if p.label == PointLabel::Positive { LABEL_POSITIVE } else { LABEL_NEGATIVE });
        }
        if let Some(b) = &prompts.bbox {
            coords.push((b.x0 / r, b.y0 / r));
            roles.push(LABEL_BOX_TL);
            coords.push((b.x1 / r, b.y1 / r));
            roles.push(LABEL_BOX_BR);
        }
        let n = coords.len();
        let sparse = if n == 0 {
            Tensor::zeros((1, 0, self.c_embed), dt, dev)?
        } else {
            let pe = Tensor::from_vec(sinusoidal_2d(&coords, self.c_embed)?, (n, self.c_embed), dev)?.to_dtype(dt)?;
            let labels = Tensor::cat(&roles.iter().map(|&i| self.label(i)).collect::<Result<Vec<_>>>()?, 0)?;
            (pe + labels)?.unsqueeze(0)?
        };
        let side = self.resolution / 16;
        let dense = match &prompts.coarse_mask {
            Some(m) => {
                let x = Tensor::from_vec(m.data.clone(), (1, 1, m.side, m.side), dev)?.to_dtype(dt)?;
                self.encode_mask(&x)?
            }
            None => self.no_mask.reshape((1, self.c_embed, 1, 1))?.broadcast_as((1, self.c_embed, side, side))?.contiguous()?,
        };
        Ok((sparse, dense))
    }

    fn encode_mask(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.norm1.forward(&self.down1.forward(x)?)?)?;
        let h = gelu(&self.norm2.forward(&self.down2.forward(&h)?)?)?;
        self.proj.forward(&h)
    }
}

/// Post-norm block of the two-way transformer.
#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: TokenNorm,
    cross_t2i: Attention,
    norm2: TokenNorm,
    mlp: Mlp,
    norm3: TokenNorm,
    cross_i2t: Attention,
    norm4: TokenNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(scope: &Scope, c: usize, heads: usize, skip_first_pe: bool) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&scope.sub("self_attn"), c, c, heads, 1)?,
            norm1: TokenNorm::new(&scope.sub("norm1"), c)?,
            cross_t2i: Attention::new(&scope.sub("cross_t2i"), c, c, heads, 2)?,
            norm2: TokenNorm::new(&scope.sub("norm2"), c)?,
            mlp: Mlp::new(&scope.sub("mlp"), c, 2 * c, c)?,
            norm3: TokenNorm::new(&scope.sub("norm3"), c)?,
            cross_i2t: Attention::new(&scope.sub("cross_i2t"), c, c, heads, 2)?,
            norm4: TokenNorm::new(&scope.sub("norm4"), c)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        q: &Tensor,
        k: &Tensor,
        q_pe: &Tensor,
        k_pe: &Tensor,
        weights: &mut Vec<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q = if self.skip_first_pe {
            let t = self.self_attn.trace(q, q, q)?;
            weights.push(t.weights);
            self.norm1.forward(&t.output)?
        } else {
            let qq = (q + q_pe)?;
            let t = self.self_attn.trace(&qq, &qq, q)?;
            weights.push(t.weights);
            self.norm1.forward(&(q + t.output)?)?
        };
        let kk = (k + k_pe)?;
        let t = self.cross_t2i.trace(&(&q + q_pe)?, &kk, k)?;
        weights.push(t.weights);
        let q = self.norm2.forward(&(q + t.output)?)?;
        let q = self.norm3.forward(&(&q + self.mlp.forward(&q)?)?)?;
        let t = self.cross_i2t.trace(&kk, &(&q + q_pe)?, &q)?;
        weights.push(t.weights);
        let k = self.norm4.forward(&(k + t.output)?)?;
        Ok((q, k))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    /// `[B, 3, R/4, R/4]` candidate mask logits.
    pub masks: Tensor,
    /// `[B, 3]` predicted mask quality in `[0, 1]`.
    pub scores: Tensor,
    /// `[B, 1]` object presence logit.
    pub presence: Tensor,
    /// `[B, C_e, R/16, R/16]` post-attention image embedding.
    pub embedding: Tensor,
    /// `[B, 1, C_e]` mask token of the best-scoring candidate.
    pub output_token: Tensor,
    /// `[B, 3, C_e]` all three mask tokens after the decoder.
    pub mask_tokens: Tensor,
    /// `[B, N_s, C_e]` encoded sparse prompts.
    pub sparse_tokens: Tensor,
    /// Softmax weights of every attention call, in execution order.
    pub attention_weights: Vec<Tensor>,
}

pub const NUM_CANDIDATES: usize = 3;
const IOU_TOKEN: usize = 0;
const PRESENCE_TOKEN: usize = 1;
const FIRST_MASK_TOKEN: usize = 2;

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    output_tokens: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: TokenNorm,
    up1: ConvTranspose2d,
    up_norm: ChannelNorm,
    up2: ConvTranspose2d,
    hyper: Vec<Mlp>,
    score_head: Mlp,
    presence_head: Linear,
    c_embed: usize,
    side: usize,
}

impl MaskDecoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.c_embed;
        let cu = cfg.c_upscale();
        let blocks = (0..2)
            .map(|i| TwoWayBlock::new(&scope.sub(&format!("block{i}")), c, cfg.heads, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let hyper = (0..NUM_CANDIDATES)
            .map(|i| Mlp::new(&scope.sub(&format!("hyper{i}")), c, c, cu))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            output_tokens: scope.tensor("output_tokens", &[2 + NUM_CANDIDATES, c], Init::Normal { std: 1.0 })?,
            blocks,
            final_attn: Attention::new(&scope.sub("final_attn"), c, c, cfg.heads, 2)?,
            final_norm: TokenNorm::new(&scope.sub("final_norm"), c)?,
            up1: ConvTranspose2d::new(&scope.sub("up1"), c, (c / 4).max(1), 2, 2)?,
            up_norm: ChannelNorm::new(&scope.sub("up_norm"), (c / 4).max(1))?,
            up2: ConvTranspose2d::new(&scope.sub("up2"), (c / 4).max(1), cu, 2, 2)?,
            hyper,
            score_head: Mlp::new(&scope.sub("score_head"), c, c, NUM_CANDIDATES)?,
            presence_head: Linear::new(&scope.sub("presence_head"), c, 1)?,
            c_embed: c,
            side: cfg.embed_side(),
        })
    }

    /// Upscale an embedding `[1, C_e, h, w]` to the `[1, C_e/8, 4h, 4w]` mask feature.
    pub fn upscale(&self, embedding: &Tensor) -> Result<Tensor> {
        let x = gelu(&self.up_norm.forward(&self.up1.forward(embedding)?)?)?;
        gelu(&self.up2.forward(&x)?)
    }

    fn hyper_weights(&self, mask_tokens: &Tensor) -> Result<Tensor> {
        let rows = (0..NUM_CANDIDATES)
            .map(|i| self.hyper[i].forward(&mask_tokens.narrow(1, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 1)?)
    }

    fn dot_masks(hyper: &Tensor, upscaled: &Tensor) -> Result<Tensor> {
        let (b, cu, h, w) = upscaled.dims4()?;
        let n = hyper.dim(1)?;
        let m = hyper.matmul(&upscaled.reshape((b, cu, h * w))?)?;
        Ok(m.reshape((b, n, h, w))?)
    }

    /// Mask logits `[1, 1, R/4, R/4]` of one candidate, decoded from an arbitrary embedding.
    pub fn mask_from_embedding(&self, embedding: &Tensor, mask_tokens: &Tensor, index: usize) -> Result<Tensor> {
        if index >= NUM_CANDIDATES {
            return Err(shape_err!("candidate index {index} out of range"));
        }
        let all = Self::dot_masks(&self.hyper_weights(mask_tokens)?, &self.upscale(embedding)?)?;
        Ok(all.narrow(1, index, 1)?)
    }

    pub fn decode_masks(&self, image_feature: &Tensor, sparse: &Tensor, dense: &Tensor) -> Result<DecoderOutputs> {
        let (b, c, h, w) = image_feature.dims4()?;
        if c != self.c_embed || h != self.side || w != self.side {
            return Err(shape_err!(
                "decoder expects [B, {0}, {2}, {2}], got {1:?}",
                self.c_embed,
                image_feature.dims(),
                self.side
            ));
        }
        if b != 1 {
            return Err(shape_err!("the prompt-conditioned decoder runs one image at a time, got B={b}"));
        }
        if dense.dims() != image_feature.dims() {
            return Err(shape_err!("dense embedding {:?} does not match feature {:?}", dense.dims(), image_feature.dims()));
        }
        let (sb, _, sc) = sparse.dims3()?;
        if sb != b || sc != c {
            return Err(shape_err!("sparse tokens {:?} incompatible with C_e={c}", sparse.dims()));
        }
        let out_tokens = self.output_tokens.unsqueeze(0)?;
        let tokens = if sparse.dim(1)? == 0 { out_tokens } else { Tensor::cat(&[&out_tokens, sparse], 1)? };
        let src = (image_feature + dense)?;
        let mut k = ops::tokenize_grid(&src)?;
        let k_pe = grid_encoding(h, w, c, src.dtype(), src.device())?;
        let q_pe = tokens.clone();
        let mut q = tokens;
        let mut weights = Vec::new();
        for block in &self.blocks {
            let (nq, nk) = block.forward(&q, &k, &q_pe, &k_pe, &mut weights)?;
            q = nq;
            k = nk;
        }
        let t = self.final_attn.trace(&(&q + &q_pe)?, &k.broadcast_add(&k_pe)?, &k)?;
        weights.push(t.weights);
        let q = self.final_norm.forward(&(q + t.output)?)?;

        let embedding = ops::detokenize_grid(&k, h, w)?;
        let mask_tokens = q.narrow(1, FIRST_MASK_TOKEN, NUM_CANDIDATES)?;
        let masks = Self::dot_masks(&self.hyper_weights(&mask_tokens)?, &self.upscale(&embedding)?)?;
        let scores = sigmoid(&self.score_head.forward(&q.narrow(1, IOU_TOKEN, 1)?)?.squeeze(1)?)?;
        let presence = self.presence_head.forward(&q.narrow(1, PRESENCE_TOKEN, 1)?)?.squeeze(1)?;
        let index = argmax_first(&ops::to_f64_vec(&scores)?);
        let output_token = mask_tokens.narrow(1, index, 1)?;
        Ok(DecoderOutputs {
            masks,
            scores,
            presence,
            embedding,
            output_token,
            mask_tokens,
            sparse_tokens: sparse.clone(),
            attention_weights: weights,
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Best candidate by predicted score: `([1, 1, R/4, R/4], index)`.
pub fn select_mask(outputs: &DecoderOutputs) -> Result<(Tensor, usize)> {
    let scores = ops::to_f64_vec(&outputs.scores)?;
    if scores.len() != NUM_CANDIDATES {
        return Err(shape_err!("select_mask supports a single image with {NUM_CANDIDATES} scores"));
    }
    let index = argmax_first(&scores);
    Ok((outputs.masks.narrow(1, index, 1)?, index))
}

/// Prompt encoder, decoder and the optional feature neck in one unit.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub prompt_encoder: PromptEncoder,
    pub decoder: MaskDecoder,
    neck: Option<Conv2d>,
}

impl BaseModel {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let neck = if cfg.c16 != cfg.c_embed {
            Some(Conv2d::new(&scope.sub("neck"), cfg.c16, cfg.c_embed, 1, 1, 0)?)
        } else {
            None
        };
        Ok(Self {
            prompt_encoder: PromptEncoder::new(&scope.sub("prompt"), cfg)?,
            decoder: MaskDecoder::new(&scope.sub("decoder"), cfg)?,
            neck,
        })
    }

    /// Map an encoder-width feature `[B, C16, h, w]` to the decoder width.
    pub fn project(&self, feature: &Tensor) -> Result<Tensor> {
        match &self.neck {
            Some(n) => n.forward(feature),
            None => Ok(feature.clone()),
        }
    }

    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<(Tensor, Tensor)> {
        self.prompt_encoder.encode_prompts(prompts)
    }

    pub fn decode(&self, feature_c16: &Tensor, prompts: &PromptSet) -> Result<DecoderOutputs> {
        let (sparse, dense) = self.encode_prompts(prompts)?;
        self.decoder.decode_masks(&self.project(feature_c16)?, &sparse, &dense)
    }
}
