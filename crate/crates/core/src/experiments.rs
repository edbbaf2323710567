//! Evaluation drivers: image metrics, point-count sweep, module ablation and
//! video propagation, with JSON and plain-text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use candle_core::DType;
use serde::Serialize;

use crate::base_model::PromptSet;
use crate::checkpoint::{load_into, ParamTable};
use crate::config::{parse_num, ModelConfig, ModuleSet};
use crate::data::prompts::{sample_positive_clicks, sample_prompts, PromptKind};
use crate::data::synth::{generate_image_sample, generate_video_sequence, Family, SyntheticSample};
use crate::error::{Error, Result};
use crate::metrics::{jf_score, miou_mbiou, BinaryMask, JfScore};
use crate::nn::{ops, ParamStore};
use crate::pipeline::{EncodedImage, FineMaskModel, TrainMode};
use crate::train::{encode_all, mix_seed, mixed_prompt, train_refiner, TrainConfig, TrainReport};
use crate::video::propagate_video;

/// Seed offset separating test scenes from training scenes.
pub const TEST_SEED_BASE: u64 = 1_000_000;
pub const VIDEO_SEED_BASE: u64 = 2_000_000;

/// Sizes and schedules of one desk-scale experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskPlan {
    pub resolution: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub heldout_images: usize,
    pub memory_sequences: usize,
    pub video_sequences: usize,
    pub frames: usize,
    pub baseline: TrainConfig,
    pub memory: TrainConfig,
    pub refiner: TrainConfig,
}

impl Default for DeskPlan {
    fn default() -> Self {
        Self {
            resolution: 256,
            train_images: 400,
            test_images: 200,
            heldout_images: 8,
            memory_sequences: 24,
            video_sequences: 20,
            frames: 8,
            baseline: TrainConfig { lr: 1e-3, epochs: 12, ..Default::default() },
            memory: TrainConfig { lr: 1e-3, epochs: 2, ..Default::default() },
            refiner: TrainConfig { lr: 1e-3, epochs: 6, ..Default::default() },
        }
    }
}

impl DeskPlan {
    /// Keys: `resolution`, `train_images`, `test_images`, `heldout_images`,
    /// `memory_sequences`, `video_sequences`, `frames`, `seed`, and
    /// `baseline_*`, `memory_*`, `refiner_*` forms of every training key.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let mut groups: [(&str, BTreeMap<String, String>); 3] = Default::default();
        groups[0].0 = "baseline_";
        groups[1].0 = "memory_";
        groups[2].0 = "refiner_";
        for (k, v) in kv {
            match k.as_str() {
                "resolution" => self.resolution = parse_num(k, v)?,
                "train_images" => self.train_images = parse_num(k, v)?,
                "test_images" => self.test_images = parse_num(k, v)?,
                "heldout_images" => self.heldout_images = parse_num(k, v)?,
                "memory_sequences" => self.memory_sequences = parse_num(k, v)?,
                "video_sequences" => self.video_sequences = parse_num(k, v)?,
                "frames" => self.frames = parse_num(k, v)?,
                "seed" => {
                    let s: u64 = parse_num(k, v)?;
                    self.set_seed(s);
                }
                _ => {
                    for (prefix, map) in groups.iter_mut() {
                        if let Some(rest) = k.strip_prefix(*prefix) {
                            map.insert(rest.to_string(), v.clone());
                        }
                    }
                }
            }
        }
        self.baseline.apply_kv(&groups[0].1)?;
        self.memory.apply_kv(&groups[1].1)?;
        self.refiner.apply_kv(&groups[2].1)?;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.baseline.seed = seed;
        self.memory.seed = seed;
        self.refiner.seed = seed;
    }

    pub fn train_set(&self) -> Result<Vec<SyntheticSample>> {
        image_set(0, self.train_images, self.resolution)
    }

    pub fn test_set(&self) -> Result<Vec<SyntheticSample>> {
        image_set(TEST_SEED_BASE, self.test_images, self.resolution)
    }

    /// Held-out scenes for loss tracking, disjoint from train and test.
    pub fn heldout_set(&self) -> Result<Vec<SyntheticSample>> {
        image_set(TEST_SEED_BASE / 2, self.heldout_images, self.resolution)
    }

    pub fn memory_sequences(&self) -> Result<Vec<Vec<SyntheticSample>>> {
        video_set(VIDEO_SEED_BASE / 2, self.memory_sequences, self.resolution, self.frames.max(2))
    }

    pub fn video_set(&self) -> Result<Vec<Vec<SyntheticSample>>> {
        video_set(VIDEO_SEED_BASE, self.video_sequences, self.resolution, self.frames)
    }
}

/// `n` image samples with seeds `base..base + n`, families in rotation.
pub fn image_set(base: u64, n: usize, r: usize) -> Result<Vec<SyntheticSample>> {
    (0..n as u64).map(|i| generate_image_sample(base + i, r, Family::cycle(i))).collect()
}

pub fn video_set(base: u64, n: usize, r: usize, t: usize) -> Result<Vec<Vec<SyntheticSample>>> {
    (0..n as u64).map(|i| generate_video_sequence(base + i, r, t)).collect()
}

/// How evaluation prompts are drawn for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPrompt {
    /// Kind drawn uniformly per sample.
    Mixed,
    Kind(PromptKind),
    /// Exactly this many positive clicks.
    Clicks(usize),
}

impl EvalPrompt {
    pub fn sample(self, gt: &BinaryMask, seed: u64, index: usize) -> Result<PromptSet> {
        let s = mix_seed(seed, 0xe7a1, index as u64);
        match self {
            EvalPrompt::Mixed => mixed_prompt(gt, s),
            EvalPrompt::Kind(k) => sample_prompts(gt, k, s),
            EvalPrompt::Clicks(n) => sample_positive_clicks(gt, n, s),
        }
    }
}

/// Metrics in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub miou: f64,
    pub mbiou: f64,
    pub samples: usize,
}

pub fn evaluate_predictions(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<EvalResult> {
    let (i, b) = miou_mbiou(pred, gt)?;
    Ok(EvalResult { miou: 100.0 * i, mbiou: 100.0 * b, samples: pred.len() })
}

pub fn logits_to_mask(logits: &candle_core::Tensor) -> Result<BinaryMask> {
    let (_, _, h, w) = logits.dims4()?;
    BinaryMask::from_logits(h, w, &ops::to_f64_vec(logits)?)
}

/// Final masks for every sample; `encodings` may come from any model that
/// shares this model's encoder weights.
pub fn predict_masks(
    model: &FineMaskModel,
    samples: &[SyntheticSample],
    encodings: Option<&[EncodedImage]>,
    prompt: EvalPrompt,
    seed: u64,
) -> Result<Vec<BinaryMask>> {
    let dtype = model.encoder_dtype();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let img = s.image_tensor(dtype)?;
            let p = prompt.sample(&s.mask, seed, i)?;
            let out = match encodings {
                Some(e) => model.forward_encoded(&img, &e[i], None, &p)?,
                None => model.forward_image(&img, &p)?,
            };
            logits_to_mask(&out.final_logits)
        })
        .collect()
}

pub fn evaluate(
    model: &FineMaskModel,
    samples: &[SyntheticSample],
    encodings: Option<&[EncodedImage]>,
    prompt: EvalPrompt,
    seed: u64,
) -> Result<EvalResult> {
    let pred = predict_masks(model, samples, encodings, prompt, seed)?;
    let gt: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate_predictions(&pred, &gt)
}

/// Same weights with every refiner module bypassed.
pub fn baseline_view(model: &FineMaskModel) -> FineMaskModel {
    let mut m = model.clone();
    m.set_modules(ModuleSet::NONE);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub points: usize,
    pub baseline: EvalResult,
    pub refined: EvalResult,
}

/// Baseline and refined metrics at each positive-click count.
pub fn prompt_sweep(
    model: &FineMaskModel,
    samples: &[SyntheticSample],
    encodings: Option<&[EncodedImage]>,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let base = baseline_view(model);
    counts
        .iter()
        .map(|&n| {
            Ok(SweepRow {
                points: n,
                baseline: evaluate(&base, samples, encodings, EvalPrompt::Clicks(n), seed)?,
                refined: evaluate(model, samples, encodings, EvalPrompt::Clicks(n), seed)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub modules: String,
    pub result: EvalResult,
    pub train_seconds: f64,
    pub heldout_before: Option<f64>,
    pub heldout_after: Option<f64>,
}

/// Everything an ablation run needs that does not depend on the row.
pub struct AblationInputs<'a> {
    pub cfg: &'a ModelConfig,
    pub baseline: &'a ParamTable,
    pub train: &'a [SyntheticSample],
    pub train_encodings: Option<&'a [EncodedImage]>,
    pub heldout: &'a [SyntheticSample],
    pub test: &'a [SyntheticSample],
    pub test_encodings: Option<&'a [EncodedImage]>,
    pub schedule: &'a TrainConfig,
    pub eval_seed: u64,
}

/// Train one refiner with `modules` on top of the baseline weights.
pub fn train_row(inputs: &AblationInputs, modules: ModuleSet) -> Result<(ParamStore, FineMaskModel, TrainReport)> {
    let store = ParamStore::new(DType::F32, inputs.schedule.seed);
    let mut model = FineMaskModel::build(&store, &inputs.cfg.clone().with_modules(modules), TrainMode::Refiner)?;
    load_into(&store, inputs.baseline)?;
    let cfg = TrainConfig { modules, ..inputs.schedule.clone() };
    let report = train_refiner(&store, &mut model, inputs.train, inputs.train_encodings, inputs.heldout, &cfg)?;
    Ok((store, model, report))
}

/// One trained and evaluated refiner per module subset, all from the same
/// baseline with the same schedule.
pub fn ablate(inputs: &AblationInputs, rows: &[ModuleSet]) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&m| {
            let (_, model, report) = train_row(inputs, m)?;
            let result = evaluate(&model, inputs.test, inputs.test_encodings, EvalPrompt::Mixed, inputs.eval_seed)?;
            Ok(AblationRow {
                modules: m.to_string(),
                result,
                train_seconds: report.seconds,
                heldout_before: report.heldout_before,
                heldout_after: report.heldout_after,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VideoResult {
    pub sequences: usize,
    pub frames: usize,
    /// Means over sequences, in percentage points.
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Propagate every sequence from a first-frame prompt and score J and F.
pub fn eval_video(model: &FineMaskModel, sequences: &[Vec<SyntheticSample>], seed: u64) -> Result<VideoResult> {
    if sequences.is_empty() {
        return Err(Error::Empty("video set"));
    }
    let dtype = model.encoder_dtype();
    let (mut j, mut f) = (0.0, 0.0);
    for (i, seq) in sequences.iter().enumerate() {
        let frames = seq.iter().map(|s| s.image_tensor(dtype)).collect::<Result<Vec<_>>>()?;
        let prompt = EvalPrompt::Mixed.sample(&seq[0].mask, seed, i)?;
        let outs = propagate_video(model, &frames, &prompt)?;
        let pred = outs.iter().map(|o| logits_to_mask(&o.final_logits)).collect::<Result<Vec<_>>>()?;
        let gt: Vec<BinaryMask> = seq.iter().map(|s| s.mask.clone()).collect();
        let JfScore { j: sj, f: sf, .. } = jf_score(&pred, &gt)?;
        j += sj;
        f += sf;
    }
    let n = sequences.len() as f64;
    let (j, f) = (100.0 * j / n, 100.0 * f / n);
    Ok(VideoResult { sequences: sequences.len(), frames: sequences[0].len(), j, f, jf: (j + f) / 2.0 })
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.points.to_string(),
                format!("{:.2}", r.baseline.miou),
                format!("{:.2}", r.baseline.mbiou),
                format!("{:.2}", r.refined.miou),
                format!("{:.2}", r.refined.mbiou),
            ]
        })
        .collect();
    format_table(&["points", "base mIoU", "base mBIoU", "refined mIoU", "refined mBIoU"], &body)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.modules.clone(), format!("{:.2}", r.result.miou), format!("{:.2}", r.result.mbiou), format!("{:.0}", r.train_seconds)])
        .collect();
    format_table(&["modules", "mIoU", "mBIoU", "train s"], &body)
}

pub fn eval_table(rows: &[(String, EvalResult)]) -> String {
    let body: Vec<Vec<String>> =
        rows.iter().map(|(n, r)| vec![n.clone(), format!("{:.2}", r.miou), format!("{:.2}", r.mbiou), r.samples.to_string()]).collect();
    format_table(&["model", "mIoU", "mBIoU", "samples"], &body)
}

pub fn video_table(rows: &[(String, VideoResult)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(n, r)| vec![n.clone(), format!("{:.2}", r.j), format!("{:.2}", r.f), format!("{:.2}", r.jf)])
        .collect();
    format_table(&["model", "J", "F", "J&F"], &body)
}

/// Wall-clock helper for reports.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// Encodings with sub-images, shared by every configuration of one baseline.
pub fn shared_encodings(model: &FineMaskModel, samples: &[SyntheticSample]) -> Result<Vec<EncodedImage>> {
    encode_all(model, samples, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::store_table;

    fn tiny_model(modules: ModuleSet) -> (ParamStore, FineMaskModel) {
        let store = ParamStore::new(DType::F32, 5);
        let model = FineMaskModel::build(&store, &ModelConfig::tiny(32).with_modules(modules), TrainMode::Inference).unwrap();
        (store, model)
    }

    #[test]
    fn perfect_predictions_score_exactly_one() {
        let samples = image_set(0, 6, 64).unwrap();
        let gt: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
        let pred: Vec<BinaryMask> = samples
            .iter()
            .map(|s| {
                let logits: Vec<f64> = s.mask.data.iter().map(|&v| if v == 1 { 20.0 } else { -20.0 }).collect();
                BinaryMask::from_logits(64, 64, &logits).unwrap()
            })
            .collect();
        let r = evaluate_predictions(&pred, &gt).unwrap();
        assert_eq!((r.miou, r.mbiou), (100.0, 100.0));
    }

    #[test]
    fn evaluation_is_seed_deterministic_and_cache_transparent() {
        let (_, model) = tiny_model(ModuleSet::ALL);
        let samples = image_set(10, 3, 32).unwrap();
        let enc = shared_encodings(&model, &samples).unwrap();
        let a = evaluate(&model, &samples, None, EvalPrompt::Mixed, 1).unwrap();
        let b = evaluate(&model, &samples, Some(&enc), EvalPrompt::Mixed, 1).unwrap();
        assert_eq!(a, b);
        let base = baseline_view(&model);
        assert_eq!(
            evaluate(&base, &samples, None, EvalPrompt::Clicks(2), 3).unwrap(),
            evaluate(&base, &samples, Some(&enc), EvalPrompt::Clicks(2), 3).unwrap()
        );
    }

    #[test]
    fn sweep_has_one_row_per_count() {
        let (_, model) = tiny_model(ModuleSet::ALL);
        let samples = image_set(20, 2, 32).unwrap();
        let rows = prompt_sweep(&model, &samples, None, &[1, 2, 5, 10], 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.points).collect::<Vec<_>>(), vec![1, 2, 5, 10]);
        let single = prompt_sweep(&model, &samples, None, &[1], 0).unwrap();
        assert_eq!(single[0].refined, evaluate(&model, &samples, None, EvalPrompt::Clicks(1), 0).unwrap());
        assert!(sweep_table(&rows).lines().count() == 6);
    }

    #[test]
    fn ablation_covers_every_row_pattern() {
        let (store, _) = tiny_model(ModuleSet::NONE);
        let table = store_table(&store).unwrap();
        let cfg = ModelConfig::tiny(32);
        let train = image_set(0, 2, 32).unwrap();
        let test = image_set(TEST_SEED_BASE, 2, 32).unwrap();
        let schedule = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
        let inputs = AblationInputs {
            cfg: &cfg,
            baseline: &table,
            train: &train,
            train_encodings: None,
            heldout: &[],
            test: &test,
            test_encodings: None,
            schedule: &schedule,
            eval_seed: 0,
        };
        let rows = ablate(&inputs, &ModuleSet::ablation_rows()).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.modules.as_str()).collect();
        assert_eq!(names, vec!["none", "la", "pr,mr", "la,mr", "la,pr", "la,pr,mr"]);
        let base = evaluate(&baseline_view(&tiny_model(ModuleSet::NONE).1), &test, None, EvalPrompt::Mixed, 0).unwrap();
        assert_eq!(rows[0].result, base);
    }

    #[test]
    fn video_scores_are_percentages() {
        let (_, model) = tiny_model(ModuleSet::ALL);
        let seqs = video_set(0, 2, 32, 3).unwrap();
        let r = eval_video(&model, &seqs, 0).unwrap();
        assert!((0.0..=100.0).contains(&r.jf));
        assert_eq!((r.sequences, r.frames), (2, 3));
    }

    #[test]
    fn plan_keys_route_to_schedules() {
        let mut p = DeskPlan::default();
        p.apply_kv(&crate::config::parse_kv("train_images=10\nrefiner_epochs=3\nbaseline_lr=0.002\nseed=7\n").unwrap()).unwrap();
        assert_eq!((p.train_images, p.refiner.epochs, p.baseline.lr, p.memory.seed), (10, 3, 0.002, 7));
    }

    #[test]
    fn tables_align() {
        let t = format_table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz   1\n");
    }
}
