//! Training loops for the baseline, its video memory and the refiner.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::base_model::{PromptSet, NUM_CANDIDATES};
use crate::config::{parse_num, ModuleSet};
use crate::data::prompts::{sample_prompts, PromptKind};
use crate::data::synth::SyntheticSample;
use crate::error::{Error, Result};
use crate::losses::{bce_dice, downsample_target, total_loss, LossWeights};
use crate::metrics::{iou, BinaryMask};
use crate::nn::ops;
use crate::nn::ParamStore;
use crate::pipeline::{EncodedImage, FineMaskModel};
use crate::video::MemoryBank;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub modules: ModuleSet,
    pub weight_decay: f64,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 10, batch_size: 4, seed: 0, modules: ModuleSet::ALL, weight_decay: 1e-4, verbose: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Recognised keys: `lr`, `epochs`, `batch_size`, `seed`, `modules`,
    /// `weight_decay`. Other keys are left for the caller.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "lr" => self.lr = parse_num(k, v)?,
                "epochs" => self.epochs = parse_num(k, v)?,
                "batch_size" => self.batch_size = parse_num(k, v)?,
                "seed" => self.seed = parse_num(k, v)?,
                "modules" => self.modules = v.parse()?,
                "weight_decay" => self.weight_decay = parse_num(k, v)?,
                _ => {}
            }
        }
        self.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub heldout_before: Option<f64>,
    pub heldout_after: Option<f64>,
    pub seconds: f64,
}

/// Per-(epoch, sample) seed, so prompts differ across epochs.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Prompt kind drawn uniformly, then a prompt of that kind.
pub fn mixed_prompt(gt: &BinaryMask, seed: u64) -> Result<PromptSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = PromptKind::ALL[rng.gen_range(0..PromptKind::ALL.len())];
    sample_prompts(gt, kind, rng.gen())
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

struct Stepper {
    opt: AdamW,
    lr: f64,
    step: usize,
    total: usize,
}

impl Stepper {
    fn new(vars: Vec<Var>, cfg: &TrainConfig, total: usize) -> Result<Self> {
        let params = ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
        Ok(Self { opt: AdamW::new(vars, params)?, lr: cfg.lr, step: 0, total })
    }

    fn apply(&mut self, loss: &Tensor) -> Result<f64> {
        let value = scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: value });
        }
        self.opt.set_learning_rate(cosine_lr(self.lr, self.step, self.total));
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(value)
    }
}

fn batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5eed, epoch as u64)));
    order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

fn mean_of(losses: Vec<Tensor>) -> Result<Tensor> {
    let n = losses.len() as f64;
    Ok((Tensor::stack(&losses, 0)?.sum_all()? / n)?)
}

/// Binarized candidate quality used as the score regression target.
fn candidate_ious(masks: &Tensor, target_low: &Tensor) -> Result<Vec<f64>> {
    let (_, k, h, w) = masks.dims4()?;
    let gt = BinaryMask::from_threshold(h, w, &ops::to_f64_vec(target_low)?, 0.5)?;
    (0..k)
        .map(|i| {
            let m = BinaryMask::from_logits(h, w, &ops::to_f64_vec(&masks.narrow(1, i, 1)?)?)?;
            iou(&m, &gt)
        })
        .collect()
}

/// Baseline objective: BCE + Dice on the best-matching candidate at `R/4`
/// against the area-averaged target, plus a squared error between each
/// candidate's predicted score and its actual IoU.
pub fn baseline_loss(model: &FineMaskModel, sample: &SyntheticSample, prompts: &PromptSet) -> Result<Tensor> {
    let dtype = model.encoder_dtype();
    let img = sample.image_tensor(dtype)?;
    let pyramid = model.encoder.encode(&img)?;
    let out = model.base.decode(&pyramid.f16, prompts)?;
    let side = out.masks.dim(2)?;
    let target = downsample_target(&sample.mask_tensor(dtype)?, side)?;
    candidate_loss(&out.masks, &out.scores, &target)
}

fn candidate_loss(masks: &Tensor, scores: &Tensor, target: &Tensor) -> Result<Tensor> {
    let per: Vec<Tensor> = (0..NUM_CANDIDATES).map(|i| bce_dice(&masks.narrow(1, i, 1)?, target)).collect::<Result<_>>()?;
    let values: Vec<f64> = per.iter().map(scalar).collect::<Result<_>>()?;
    let best = values.iter().enumerate().fold(0, |b, (i, &v)| if v < values[b] { i } else { b });
    let ious = candidate_ious(masks, target)?;
    let iou_t = Tensor::from_vec(ious, (1, NUM_CANDIDATES), masks.device())?.to_dtype(masks.dtype())?;
    let score_loss = (scores - iou_t)?.sqr()?.mean_all()?;
    Ok((&per[best] + score_loss)?)
}

fn log(cfg: &TrainConfig, msg: impl FnOnce() -> String) {
    if cfg.verbose {
        eprintln!("{}", msg());
    }
}

/// Train encoder and base model end to end. Memory parameters are untouched.
pub fn train_baseline(store: &ParamStore, model: &FineMaskModel, data: &[SyntheticSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let start = Instant::now();
    let vars = store.vars_with_prefix(&["base.", "encoder."]);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut stepper = Stepper::new(vars, cfg, per_epoch * cfg.epochs)?;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(data.len(), cfg, epoch) {
            let losses = batch
                .iter()
                .map(|&i| {
                    let p = mixed_prompt(&data[i].mask, mix_seed(cfg.seed, epoch as u64, i as u64))?;
                    baseline_loss(model, &data[i], &p)
                })
                .collect::<Result<Vec<_>>>()?;
            let v = stepper.apply(&mean_of(losses)?)?;
            report.step_losses.push(v);
            sum += v;
        }
        report.epoch_losses.push(sum / per_epoch as f64);
        log(cfg, || format!("baseline epoch {} loss {:.4} ({:.0}s)", epoch + 1, sum / per_epoch as f64, start.elapsed().as_secs_f64()));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Train memory encoder and memory attention by rolling each sequence out as
/// inference does: frame 0 is segmented from its prompt and pinned, every
/// later frame is decoded from its memory-conditioned feature with the same
/// prompt and then pushed. The loss averages over frames 1..T. Every fourth
/// sequence is replayed as a static clip (frame 0 repeated).
pub fn train_memory(store: &ParamStore, model: &FineMaskModel, sequences: &[Vec<SyntheticSample>], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if sequences.iter().all(|s| s.len() < 2) {
        return Err(Error::Empty("memory training sequences"));
    }
    let start = Instant::now();
    let mut base_only = model.clone();
    base_only.set_modules(ModuleSet::NONE);
    let model = &base_only;
    let dtype = model.encoder_dtype();
    let usable: Vec<usize> = (0..sequences.len()).filter(|&s| sequences[s].len() >= 2).collect();
    let per_epoch = usable.len().div_ceil(cfg.batch_size);
    let mut stepper = Stepper::new(store.vars_with_prefix(&["memory."]), cfg, per_epoch * cfg.epochs)?;
    let mut report = TrainReport::default();
    let rollout = |s: usize| -> Result<Tensor> {
        let seq = &sequences[s];
        let frame = |t: usize| if s % 4 == 3 { &seq[0] } else { &seq[t] };
        let p = mixed_prompt(&seq[0].mask, mix_seed(cfg.seed, s as u64, 0))?;
        let img0 = seq[0].image_tensor(dtype)?;
        let first = model.forward_encoded(&img0, &model.encode_with(&img0, false)?.detach(), None, &p)?;
        let mut bank = MemoryBank::new(model.config().bank_capacity)?;
        bank.pin(model.memory.encoder.encode_memory(&first.decoder_feature.detach(), &first.final_logits.detach(), 0)?)?;
        let mut losses = Vec::with_capacity(seq.len() - 1);
        for t in 1..seq.len() {
            let img = frame(t).image_tensor(dtype)?;
            let enc = model.encode_with(&img, false)?.detach();
            let g = model.memory.attention.condition(&enc.pyramid.f16, &bank)?;
            let out = model.forward_encoded(&img, &enc, Some(&g), &p)?;
            let target = downsample_target(&frame(t).mask_tensor(dtype)?, out.decoder.masks.dim(2)?)?;
            losses.push(candidate_loss(&out.decoder.masks, &out.decoder.scores, &target)?);
            bank.push(model.memory.encoder.encode_memory(&out.decoder_feature.detach(), &out.final_logits.detach(), t)?)?;
        }
        mean_of(losses)
    };
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(usable.len(), cfg, epoch) {
            let losses = batch.iter().map(|&k| rollout(usable[k])).collect::<Result<Vec<_>>>()?;
            let v = stepper.apply(&mean_of(losses)?)?;
            report.step_losses.push(v);
            sum += v;
        }
        report.epoch_losses.push(sum / per_epoch as f64);
        log(cfg, || format!("memory epoch {} loss {:.4}", epoch + 1, sum / per_epoch as f64));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Encoder outputs for every sample, computed once; the encoder is frozen
/// while the refiner trains.
pub fn encode_all(model: &FineMaskModel, data: &[SyntheticSample], with_subimages: bool) -> Result<Vec<EncodedImage>> {
    let dtype = model.encoder_dtype();
    data.iter().map(|s| Ok(model.encode_with(&s.image_tensor(dtype)?, with_subimages)?.detach())).collect()
}

/// Refiner objective for one sample. With MR the deep-supervised loss is
/// used, otherwise BCE + Dice on the full-resolution output.
pub fn refiner_loss(model: &FineMaskModel, sample: &SyntheticSample, enc: &EncodedImage, prompts: &PromptSet, weights: LossWeights) -> Result<Tensor> {
    let dtype = model.encoder_dtype();
    let out = model.forward_encoded(&sample.image_tensor(dtype)?, enc, None, prompts)?;
    let target = sample.mask_tensor(dtype)?;
    match &out.refinement {
        Some(r) => total_loss(&r.final_logits, &r.intermediates, &target, weights),
        None => bce_dice(&out.final_logits, &target),
    }
}

fn refiner_prefixes(m: ModuleSet) -> Vec<&'static str> {
    let mut p = Vec::new();
    if m.la {
        p.push("la.");
    }
    if m.pr {
        p.push("pr.");
    }
    if m.mr {
        p.push("mr.");
    }
    p
}

/// Train the enabled refiner modules on top of a frozen baseline. The model
/// must have been built in refiner mode. `encodings` may be precomputed with
/// [`encode_all`]; `heldout` is scored before and after training.
pub fn train_refiner(
    store: &ParamStore,
    model: &mut FineMaskModel,
    data: &[SyntheticSample],
    encodings: Option<&[EncodedImage]>,
    heldout: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    model.set_modules(cfg.modules);
    let start = Instant::now();
    let mut report = TrainReport::default();
    if cfg.modules == ModuleSet::NONE {
        return Ok(report);
    }
    let owned;
    let encodings = match encodings {
        Some(e) => e,
        None => {
            owned = encode_all(model, data, cfg.modules.la)?;
            &owned
        }
    };
    if encodings.len() != data.len() {
        return Err(Error::Config(format!("{} encodings for {} samples", encodings.len(), data.len())));
    }
    let held_enc = encode_all(model, heldout, cfg.modules.la)?;
    let weights = LossWeights::default();
    let held_loss = |model: &FineMaskModel| -> Result<Option<f64>> {
        if heldout.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for (i, (s, e)) in heldout.iter().zip(&held_enc).enumerate() {
            let p = mixed_prompt(&s.mask, mix_seed(cfg.seed, 0xfeed, i as u64))?;
            sum += scalar(&refiner_loss(model, s, e, &p, weights)?.detach())?;
        }
        Ok(Some(sum / heldout.len() as f64))
    };
    report.heldout_before = held_loss(model)?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut stepper = Stepper::new(store.vars_with_prefix(&refiner_prefixes(cfg.modules)), cfg, per_epoch * cfg.epochs)?;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(data.len(), cfg, epoch) {
            let losses = batch
                .iter()
                .map(|&i| {
                    let p = mixed_prompt(&data[i].mask, mix_seed(cfg.seed, epoch as u64, i as u64))?;
                    refiner_loss(model, &data[i], &encodings[i], &p, weights)
                })
                .collect::<Result<Vec<_>>>()?;
            let v = stepper.apply(&mean_of(losses)?)?;
            report.step_losses.push(v);
            sum += v;
        }
        report.epoch_losses.push(sum / per_epoch as f64);
        log(cfg, || {
            format!("refiner[{}] epoch {} loss {:.4} ({:.0}s)", cfg.modules, epoch + 1, sum / per_epoch as f64, start.elapsed().as_secs_f64())
        });
    }
    report.heldout_after = held_loss(model)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth::{generate_image_sample, generate_video_sequence, Family};
    use crate::pipeline::{TrainMode, BASELINE_PREFIXES};

    fn data(n: u64, r: usize) -> Vec<SyntheticSample> {
        (0..n).map(|i| generate_image_sample(i, r, Family::cycle(i)).unwrap()).collect()
    }

    fn quick(modules: ModuleSet) -> TrainConfig {
        TrainConfig { lr: 3e-3, epochs: 2, batch_size: 2, seed: 4, modules, ..Default::default() }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 99, 100) < 1e-6);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        let kv = crate::config::parse_kv("lr=0.01\nmodules=la,mr\nresolution=64\n").unwrap();
        c.apply_kv(&kv).unwrap();
        assert_eq!((c.lr, c.modules), (0.01, ModuleSet { la: true, pr: false, mr: true }));
    }

    #[test]
    fn baseline_training_reduces_loss_and_is_deterministic() {
        let cfg_m = ModelConfig::tiny(32);
        let train = data(8, 32);
        let run = || {
            let store = ParamStore::new(DType::F32, 1);
            let model = FineMaskModel::build(&store, &cfg_m, TrainMode::Baseline).unwrap();
            let cfg = TrainConfig { epochs: 4, ..quick(ModuleSet::NONE) };
            let rep = train_baseline(&store, &model, &train, &cfg).unwrap();
            (rep, store.snapshot().unwrap())
        };
        let (rep, snap) = run();
        assert!(rep.epoch_losses.last().unwrap() < &rep.step_losses[0], "{rep:?}");
        assert_eq!(snap, run().1);
    }

    #[test]
    fn refiner_training_freezes_the_baseline() {
        let cfg_m = ModelConfig::tiny(32);
        let store = ParamStore::new(DType::F32, 2);
        let mut model = FineMaskModel::build(&store, &cfg_m, TrainMode::Refiner).unwrap();
        let before: BTreeMap<_, _> = store.snapshot().unwrap().into_iter().filter(|(k, _)| BASELINE_PREFIXES.iter().any(|p| k.starts_with(p))).collect();
        let train = data(6, 32);
        let rep = train_refiner(&store, &mut model, &train, None, &data(2, 32), &quick(ModuleSet::ALL)).unwrap();
        let after = store.snapshot().unwrap();
        for (k, v) in &before {
            assert_eq!(&after[k], v, "{k}");
        }
        assert_eq!(rep.step_losses.len(), 6);
        assert!(rep.heldout_before.is_some() && rep.heldout_after.is_some());
        let changed = after.iter().filter(|(k, _)| k.starts_with("mr.")).count();
        assert!(changed > 0);
    }

    #[test]
    fn empty_module_set_trains_nothing() {
        let cfg_m = ModelConfig::tiny(32);
        let store = ParamStore::new(DType::F32, 2);
        let mut model = FineMaskModel::build(&store, &cfg_m, TrainMode::Refiner).unwrap();
        let before = store.snapshot().unwrap();
        let rep = train_refiner(&store, &mut model, &data(2, 32), None, &[], &quick(ModuleSet::NONE)).unwrap();
        assert!(rep.step_losses.is_empty());
        assert_eq!(before, store.snapshot().unwrap());
    }

    #[test]
    fn memory_training_touches_only_memory() {
        let cfg_m = ModelConfig::tiny(32);
        let store = ParamStore::new(DType::F32, 3);
        let model = FineMaskModel::build(&store, &cfg_m, TrainMode::Baseline).unwrap();
        let before = store.snapshot().unwrap();
        let seqs: Vec<_> = (0..2).map(|s| generate_video_sequence(s, 32, 3).unwrap()).collect();
        train_memory(&store, &model, &seqs, &quick(ModuleSet::NONE)).unwrap();
        let after = store.snapshot().unwrap();
        for (k, v) in &before {
            if !k.starts_with("memory.") {
                assert_eq!(&after[k], v, "{k}");
            }
        }
        assert!(before.iter().any(|(k, v)| k.starts_with("memory.") && &after[k] != v));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let store = ParamStore::new(DType::F32, 0);
        let v = store.get_or_init("x", &[1], crate::nn::Init::Ones).unwrap();
        let mut s = Stepper::new(vec![v.clone()], &TrainConfig::default(), 10).unwrap();
        let bad = (v.as_tensor() * f64::NAN).unwrap().sum_all().unwrap();
        assert!(matches!(s.apply(&bad), Err(Error::Diverged { step: 0, .. })));
    }
}
