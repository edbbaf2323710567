//! Memory encoder, FIFO memory bank, memory attention and frame propagation.

use std::collections::VecDeque;

use candle_core::Tensor;

use crate::base_model::PromptSet;
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::ops::{self, gelu, sigmoid};
use crate::nn::{grid_encoding, Attention, AttentionTrace, Conv2d, Scope};
use crate::pipeline::{ForwardOutputs, FineMaskModel};

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    /// `[C_m, R/16, R/16]`
    pub embedding: Tensor,
    pub frame_index: usize,
}

/// Mask probability pooled to the embedding grid, fused with the frame feature.
#[derive(Debug, Clone)]
pub struct MemoryEncoder {
    fuse: Conv2d,
    proj: Conv2d,
    c_embed: usize,
    side: usize,
}

impl MemoryEncoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            fuse: Conv2d::new(&scope.sub("fuse"), cfg.c_embed + 1, cfg.c_memory, 3, 1, 1)?,
            proj: Conv2d::new(&scope.sub("proj"), cfg.c_memory, cfg.c_memory, 1, 1, 0)?,
            c_embed: cfg.c_embed,
            side: cfg.embed_side(),
        })
    }

    /// `frame_feature [1, C_e, R/16, R/16]`, `final_logits [1, 1, R, R]`.
    pub fn encode_memory(&self, frame_feature: &Tensor, final_logits: &Tensor, frame_index: usize) -> Result<MemoryEntry> {
        let (b, c, h, w) = frame_feature.dims4()?;
        let (lb, lc, lh, lw) = final_logits.dims4()?;
        if b != 1 || c != self.c_embed || h != self.side || w != self.side {
            return Err(shape_err!("memory encoder: frame feature {:?}", frame_feature.dims()));
        }
        if lb != 1 || lc != 1 || lh != lw || lh != 16 * self.side {
            return Err(shape_err!("memory encoder: mask logits {:?}", final_logits.dims()));
        }
        let prob = ops::avg_pool(&sigmoid(final_logits)?, 16)?;
        let x = gelu(&self.fuse.forward(&Tensor::cat(&[frame_feature, &prob], 1)?)?)?;
        let embedding = self.proj.forward(&x)?.squeeze(0)?;
        Ok(MemoryEntry { embedding, frame_index })
    }
}

/// Bounded FIFO of recent entries plus an optional pinned entry that is never evicted.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    entries: VecDeque<MemoryEntry>,
    pinned: Option<MemoryEntry>,
    capacity: usize,
    last_index: Option<usize>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be at least 1".into()));
        }
        Ok(Self { entries: VecDeque::with_capacity(capacity), pinned: None, capacity, last_index: None })
    }

    fn check_order(&mut self, index: usize) -> Result<()> {
        if let Some(last) = self.last_index {
            if index <= last {
                return Err(Error::Config(format!("memory frame index {index} does not follow {last}")));
            }
        }
        self.last_index = Some(index);
        Ok(())
    }

    /// Append, dropping the oldest FIFO entry when over capacity.
    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        self.check_order(entry.frame_index)?;
        self.entries.push_back(entry);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn pin(&mut self, entry: MemoryEntry) -> Result<()> {
        self.check_order(entry.frame_index)?;
        self.pinned = Some(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len() + self.pinned.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Frame indices in attention order: pinned first, then oldest to newest.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.iter().map(|e| e.frame_index).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.pinned.iter().chain(self.entries.iter())
    }
}

/// Cross-attention from current-frame tokens to all memory tokens.
#[derive(Debug, Clone)]
pub struct MemoryAttention {
    attn: Attention,
    c16: usize,
    c_memory: usize,
}

impl MemoryAttention {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            attn: Attention::zero_output(&scope.sub("attn"), cfg.c16, cfg.c_memory, cfg.heads, 1)?,
            c16: cfg.c16,
            c_memory: cfg.c_memory,
        })
    }

    /// `frame_tokens [1, hw, C16]` on an `h x w` grid. An empty bank returns the input.
    pub fn trace(&self, frame_tokens: &Tensor, h: usize, w: usize, bank: &MemoryBank) -> Result<(Tensor, Option<AttentionTrace>)> {
        let (b, t, c) = frame_tokens.dims3()?;
        if b != 1 || c != self.c16 || t != h * w {
            return Err(shape_err!("memory attention: frame tokens {:?} on {h}x{w}", frame_tokens.dims()));
        }
        if bank.is_empty() {
            return Ok((frame_tokens.clone(), None));
        }
        let dt = frame_tokens.dtype();
        let dev = frame_tokens.device();
        let mut mem = Vec::with_capacity(bank.len());
        for e in bank.iter() {
            let (mc, mh, mw) = e.embedding.dims3()?;
            if mc != self.c_memory || (mh, mw) != (h, w) {
                return Err(shape_err!("memory entry {:?} does not match {h}x{w}", e.embedding.dims()));
            }
            mem.push(ops::tokenize_grid(&e.embedding.unsqueeze(0)?)?);
        }
        let mem_pe = grid_encoding(h, w, self.c_memory, dt, dev)?.repeat((1, bank.len(), 1))?;
        let mem = Tensor::cat(&mem, 1)?;
        let q = frame_tokens.broadcast_add(&grid_encoding(h, w, self.c16, dt, dev)?)?;
        let tr = self.attn.trace(&q, &(&mem + mem_pe)?, &mem)?;
        Ok(((frame_tokens + &tr.output)?, Some(tr)))
    }

    pub fn memory_attend(&self, frame_tokens: &Tensor, h: usize, w: usize, bank: &MemoryBank) -> Result<Tensor> {
        Ok(self.trace(frame_tokens, h, w, bank)?.0)
    }

    /// Condition a feature map `[1, C16, h, w]` on the bank.
    pub fn condition(&self, feature: &Tensor, bank: &MemoryBank) -> Result<Tensor> {
        if bank.is_empty() {
            return Ok(feature.clone());
        }
        let (_, _, h, w) = feature.dims4()?;
        let t = self.memory_attend(&ops::tokenize_grid(feature)?, h, w, bank)?;
        ops::detokenize_grid(&t, h, w)
    }
}

/// Memory encoder and attention, trained with the baseline.
#[derive(Debug, Clone)]
pub struct VideoMemory {
    pub encoder: MemoryEncoder,
    pub attention: MemoryAttention,
}

impl VideoMemory {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { encoder: MemoryEncoder::new(&scope.sub("encoder"), cfg)?, attention: MemoryAttention::new(&scope.sub("attention"), cfg)? })
    }
}

/// Segment every frame from a first-frame prompt.
///
/// Frame 0 runs plain image inference. Each later frame conditions its
/// highest-level feature on the memory bank, then runs the full pipeline
/// with the reused prompt. Every prediction is written back to memory; the
/// prompted frame is pinned.
pub fn propagate_video(model: &FineMaskModel, frames: &[Tensor], prompt: &PromptSet) -> Result<Vec<ForwardOutputs>> {
    if frames.is_empty() {
        return Err(Error::Empty("video frames"));
    }
    let mut bank = MemoryBank::new(model.config().bank_capacity)?;
    let mut outputs = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let enc = model.encode(frame)?;
        let out = if t == 0 {
            model.forward_encoded(frame, &enc, None, prompt)?
        } else {
            let g = model.memory.attention.condition(&enc.pyramid.f16, &bank)?;
            model.forward_encoded(frame, &enc, Some(&g), prompt)?
        };
        let entry = model.memory.encoder.encode_memory(&out.decoder_feature.detach(), &out.final_logits.detach(), t)?;
        if t == 0 {
            bank.pin(entry)?;
        } else {
            bank.push(entry)?;
        }
        outputs.push(out);
    }
    Ok(outputs)
}
