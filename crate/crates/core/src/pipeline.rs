//! Single-image forward pass with per-module bypass switches.

use candle_core::{DType, Tensor};

use crate::base_model::{select_mask, BaseModel, DecoderOutputs, PromptSet};
use crate::config::{ModelConfig, ModuleSet};
use crate::encoder::{validate_images, FeaturePyramid, ImageEncoder};
use crate::error::{shape_err, Result};
use crate::localization::LocalizationAugment;
use crate::nn::ops::{self, sigmoid};
use crate::nn::ParamStore;
use crate::refinement::{MaskRefinement, RefinementOutputs};
use crate::retarget::PromptRetargeting;
use crate::video::VideoMemory;

/// Parameter path prefixes of the frozen baseline.
pub const BASELINE_PREFIXES: [&str; 3] = ["base.", "encoder.", "memory."];
/// Parameter path prefixes of the refiner modules.
pub const REFINER_PREFIXES: [&str; 3] = ["la.", "mr.", "pr."];

/// Which parameter group receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Inference,
    Baseline,
    Refiner,
}

/// Encoder outputs that do not depend on the prompt or on refiner weights.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub pyramid: FeaturePyramid,
    /// Sub-image features `[4, 1, C16, h, w]` and their grid positions.
    pub subs: Option<(Tensor, [(usize, usize); 4])>,
}

impl EncodedImage {
    pub fn detach(&self) -> Self {
        Self { pyramid: self.pyramid.detach(), subs: self.subs.as_ref().map(|(t, p)| (t.detach(), *p)) }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub decoder: DecoderOutputs,
    /// Selected candidate logits `[1, 1, R/4, R/4]`.
    pub selected: Tensor,
    pub selected_index: usize,
    /// Feature handed to the decoder, `[1, C_e, R/16, R/16]`.
    pub decoder_feature: Tensor,
    pub renewed: Option<Tensor>,
    pub refinement: Option<RefinementOutputs>,
    /// `[1, 1, R, R]`
    pub final_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct FineMaskModel {
    cfg: ModelConfig,
    dtype: DType,
    pub encoder: ImageEncoder,
    pub base: BaseModel,
    pub memory: VideoMemory,
    pub la: LocalizationAugment,
    pub pr: PromptRetargeting,
    pub mr: MaskRefinement,
}

impl FineMaskModel {
    /// Build every module from `store`, creating missing parameters.
    pub fn build(store: &ParamStore, cfg: &ModelConfig, mode: TrainMode) -> Result<Self> {
        cfg.validate()?;
        let base = store.root(mode == TrainMode::Baseline);
        let refiner = store.root(mode == TrainMode::Refiner);
        Ok(Self {
            cfg: cfg.clone(),
            dtype: store.dtype(),
            encoder: ImageEncoder::new(&base.sub("encoder"), cfg)?,
            base: BaseModel::new(&base.sub("base"), cfg)?,
            memory: VideoMemory::new(&base.sub("memory"), cfg)?,
            la: LocalizationAugment::new(&refiner.sub("la"), cfg)?,
            pr: PromptRetargeting::new(&refiner.sub("pr"), cfg)?,
            mr: MaskRefinement::new(&refiner.sub("mr"), cfg)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameter dtype; inputs are converted to it.
    pub fn encoder_dtype(&self) -> DType {
        self.dtype
    }

    pub fn modules(&self) -> ModuleSet {
        self.cfg.modules
    }

    pub fn set_modules(&mut self, modules: ModuleSet) {
        self.cfg.modules = modules;
    }

    /// Encode an image `[1, 3, R, R]`; sub-images are encoded only when LA is on.
    pub fn encode(&self, image: &Tensor) -> Result<EncodedImage> {
        self.encode_with(image, self.cfg.modules.la)
    }

    pub fn encode_with(&self, image: &Tensor, with_subimages: bool) -> Result<EncodedImage> {
        validate_images(image)?;
        if image.dim(0)? != 1 {
            return Err(shape_err!("the prompted pipeline runs one image at a time, got B={}", image.dim(0)?));
        }
        let pyramid = self.encoder.encode(image)?;
        let subs = if with_subimages { Some(LocalizationAugment::encode_subimages(&self.encoder, image)?) } else { None };
        Ok(EncodedImage { pyramid, subs })
    }

    pub fn forward_image(&self, image: &Tensor, prompts: &PromptSet) -> Result<ForwardOutputs> {
        let enc = self.encode(image)?;
        self.forward_encoded(image, &enc, None, prompts)
    }

    /// Forward from cached encoder outputs. `f16_override` replaces the
    /// highest-level feature, as memory conditioning does for video frames.
    pub fn forward_encoded(
        &self,
        image: &Tensor,
        enc: &EncodedImage,
        f16_override: Option<&Tensor>,
        prompts: &PromptSet,
    ) -> Result<ForwardOutputs> {
        let m = self.cfg.modules;
        let r = self.cfg.resolution;
        let g = f16_override.unwrap_or(&enc.pyramid.f16);
        let g = if m.la {
            let (subs, positions) = match &enc.subs {
                Some(s) => (s.0.clone(), s.1),
                None => LocalizationAugment::encode_subimages(&self.encoder, image)?,
            };
            self.la.refine(g, &subs, &positions)?.refined
        } else {
            g.clone()
        };
        let decoder_feature = self.base.project(&g)?;
        let (sparse, dense) = self.base.encode_prompts(prompts)?;
        let decoder = self.base.decoder.decode_masks(&decoder_feature, &sparse, &dense)?;
        let (selected, selected_index) = select_mask(&decoder)?;

        let renewed = if m.pr {
            Some(self.pr.forward(&decoder.embedding, &prompts.points, &selected, &decoder.sparse_tokens, &decoder.output_token)?)
        } else {
            None
        };
        let (refinement, final_logits) = if m.mr {
            let emb = renewed.as_ref().unwrap_or(&decoder.embedding);
            let low = self.mr.stem.stem_lowlevel(image)?;
            let out = self.mr.refine_forward(emb, &enc.pyramid, &sigmoid(&selected)?, &low)?;
            let logits = out.final_logits.clone();
            (Some(out), logits)
        } else {
            let coarse = match &renewed {
                Some(e) => self.base.decoder.mask_from_embedding(e, &decoder.mask_tokens, selected_index)?,
                None => selected.clone(),
            };
            (None, ops::resize_bilinear(&coarse, r, r)?)
        };
        Ok(ForwardOutputs { decoder, selected, selected_index, decoder_feature, renewed, refinement, final_logits })
    }

    /// The frozen baseline alone: encode, decode, select, bilinear upsample.
    pub fn baseline_forward(&self, image: &Tensor, prompts: &PromptSet) -> Result<Tensor> {
        validate_images(image)?;
        let pyramid = self.encoder.encode(image)?;
        let out = self.base.decode(&pyramid.f16, prompts)?;
        let (sel, _) = select_mask(&out)?;
        ops::resize_bilinear(&sel, self.cfg.resolution, self.cfg.resolution)
    }
}
