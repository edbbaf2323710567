use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};
use finemask::base_model::PromptSet;
use finemask::checkpoint::{load_model, read_config, save_checkpoint, store_table};
use finemask::config::parse_kv;
use finemask::data::dataset::{group_sequences, load_dataset, load_image_png, save_mask_png, DatasetWriter};
use finemask::data::prompts::PromptKind;
use finemask::data::synth::SyntheticSample;
use finemask::experiments::{
    ablate, ablation_table, baseline_view, eval_table, eval_video, evaluate, logits_to_mask, prompt_sweep,
    shared_encodings, sweep_table, video_table, AblationInputs, DeskPlan, EvalPrompt,
};
use finemask::nn::ParamStore;
use finemask::pipeline::{FineMaskModel, TrainMode};
use finemask::train::{train_baseline, train_memory, train_refiner, TrainConfig};
use finemask::{ModelConfig, ModuleSet};
use serde_json::json;

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "finemask", about = "Promptable segmentation with localization, prompt retargeting and mask refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value file with model and experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (checkpoint, dataset or report).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory to read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory written by `generate-data`; synthesized in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Print training progress.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    GenerateData(Common),
    TrainBaseline(Common),
    TrainRefiner {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        modules: Option<String>,
    },
    Eval {
        #[command(flatten)]
        common: Common,
        /// mixed, box, points, coarse or clicks:N
        #[arg(long, default_value = "mixed")]
        prompt: String,
    },
    PromptSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        counts: Vec<usize>,
    },
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Module subset to train, e.g. `la,pr`; repeat for several rows.
        /// Defaults to every ablation row.
        #[arg(long)]
        modules: Vec<String>,
    },
    EvalVideo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<usize>,
    },
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// JSON prompt file: {"points": [{"x":..,"y":..,"label":"positive"}], "box": {..}}
        #[arg(long)]
        prompts: PathBuf,
    },
}

struct Setup {
    plan: DeskPlan,
    model: ModelConfig,
}

fn setup(c: &Common) -> CliResult<Setup> {
    let kv = match &c.config {
        Some(p) => parse_kv(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let mut plan = DeskPlan::default();
    plan.apply_kv(&kv)?;
    if let Some(s) = c.seed {
        plan.set_seed(s);
    }
    for t in [&mut plan.baseline, &mut plan.memory, &mut plan.refiner] {
        t.verbose = c.verbose;
    }
    let mut model = ModelConfig { resolution: plan.resolution, ..ModelConfig::default() };
    model.apply_kv(&kv)?;
    plan.resolution = model.resolution;
    Ok(Setup { plan, model })
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| format!("--{flag} is required").into())
}

fn images(c: &Common, split: &str, fallback: impl FnOnce() -> finemask::Result<Vec<SyntheticSample>>) -> CliResult<Vec<SyntheticSample>> {
    match &c.data {
        Some(d) => Ok(load_dataset(&d.join(split))?.into_iter().map(|(_, s)| s).collect()),
        None => Ok(fallback()?),
    }
}

fn sequences(c: &Common, split: &str, fallback: impl FnOnce() -> finemask::Result<Vec<Vec<SyntheticSample>>>) -> CliResult<Vec<Vec<SyntheticSample>>> {
    match &c.data {
        Some(d) if d.join(split).exists() => Ok(group_sequences(load_dataset(&d.join(split))?)),
        _ => Ok(fallback()?),
    }
}

fn write_report(c: &Common, name: &str, value: serde_json::Value, table: &str) -> CliResult<()> {
    print!("{table}");
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(&value)? + "\n")?;
        fs::write(out.join(format!("{name}.txt")), table)?;
    }
    Ok(())
}

/// Model from a checkpoint; the config stored with it wins over `--config`.
fn load(c: &Common, mode: TrainMode) -> CliResult<(ParamStore, FineMaskModel, ModelConfig)> {
    let dir = need(&c.checkpoint, "checkpoint")?;
    let cfg = read_config(dir)?;
    let (store, model) = load_model(dir, &cfg, mode, DType::F32, 0)?;
    Ok((store, model, cfg))
}

fn parse_prompt(s: &str) -> CliResult<EvalPrompt> {
    if s == "mixed" {
        return Ok(EvalPrompt::Mixed);
    }
    if let Some(n) = s.strip_prefix("clicks:") {
        return Ok(EvalPrompt::Clicks(n.parse()?));
    }
    Ok(EvalPrompt::Kind(s.parse::<PromptKind>()?))
}

fn generate(c: &Common) -> CliResult<()> {
    let s = setup(c)?;
    let out = need(&c.out, "out")?;
    let write_images = |split: &str, samples: Vec<SyntheticSample>| -> CliResult<()> {
        let mut w = DatasetWriter::create(&out.join(split))?;
        for smp in &samples {
            w.add(&format!("{}_{:07}", smp.family, smp.seed), smp, None, None)?;
        }
        w.finish()?;
        println!("{split}: {} images", samples.len());
        Ok(())
    };
    write_images("train", s.plan.train_set()?)?;
    write_images("test", s.plan.test_set()?)?;
    for (split, seqs) in [("memory", s.plan.memory_sequences()?), ("video", s.plan.video_set()?)] {
        let mut w = DatasetWriter::create(&out.join(split))?;
        for seq in &seqs {
            for (k, f) in seq.iter().enumerate() {
                w.add(&format!("seq{:07}_{k:03}", f.seed), f, Some(f.seed), Some(k))?;
            }
        }
        w.finish()?;
        println!("{split}: {} sequences", seqs.len());
    }
    Ok(())
}

fn cmd_train_baseline(c: &Common) -> CliResult<()> {
    let s = setup(c)?;
    let out = need(&c.out, "out")?;
    let cfg = s.model.clone().with_modules(ModuleSet::NONE);
    let store = ParamStore::new(DType::F32, s.plan.baseline.seed);
    let model = FineMaskModel::build(&store, &cfg, TrainMode::Baseline)?;
    let train = images(c, "train", || s.plan.train_set())?;
    let base = train_baseline(&store, &model, &train, &s.plan.baseline)?;
    let seqs = sequences(c, "memory", || s.plan.memory_sequences())?;
    let mem = if seqs.is_empty() { None } else { Some(train_memory(&store, &model, &seqs, &s.plan.memory)?) };
    save_checkpoint(&store, &s.model, out)?;
    let report = json!({
        "train_images": train.len(),
        "epoch_losses": base.epoch_losses,
        "seconds": base.seconds,
        "memory_epoch_losses": mem.as_ref().map(|m| m.epoch_losses.clone()),
        "memory_seconds": mem.as_ref().map(|m| m.seconds),
    });
    fs::write(out.join("train_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("baseline saved to {} ({:.0}s)", out.display(), base.seconds);
    Ok(())
}

fn cmd_train_refiner(c: &Common, modules: &Option<String>) -> CliResult<()> {
    let s = setup(c)?;
    let out = need(&c.out, "out")?;
    let (store, mut model, cfg) = load(c, TrainMode::Refiner)?;
    let mut tc: TrainConfig = s.plan.refiner.clone();
    if let Some(m) = modules {
        tc.modules = m.parse()?;
    }
    let train = images(c, "train", || s.plan.train_set())?;
    let held = s.plan.heldout_set()?;
    let rep = train_refiner(&store, &mut model, &train, None, &held, &tc)?;
    save_checkpoint(&store, &cfg.with_modules(tc.modules), out)?;
    let report = json!({
        "modules": tc.modules.to_string(),
        "epoch_losses": rep.epoch_losses,
        "heldout_before": rep.heldout_before,
        "heldout_after": rep.heldout_after,
        "seconds": rep.seconds,
    });
    fs::write(out.join("train_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("refiner [{}] saved to {} ({:.0}s)", tc.modules, out.display(), rep.seconds);
    Ok(())
}

fn cmd_eval(c: &Common, prompt: &str) -> CliResult<()> {
    let s = setup(c)?;
    let (_, model, _) = load(c, TrainMode::Inference)?;
    let test = images(c, "test", || s.plan.test_set())?;
    let p = parse_prompt(prompt)?;
    let enc = shared_encodings(&model, &test)?;
    let seed = s.plan.refiner.seed;
    let base = evaluate(&baseline_view(&model), &test, Some(&enc), p, seed)?;
    let refined = evaluate(&model, &test, Some(&enc), p, seed)?;
    let rows = vec![("baseline".to_string(), base), (format!("refined [{}]", model.modules()), refined)];
    write_report(c, "eval", json!({ "prompt": prompt, "baseline": base, "refined": refined }), &eval_table(&rows))
}

fn cmd_sweep(c: &Common, counts: &[usize]) -> CliResult<()> {
    let s = setup(c)?;
    let (_, model, _) = load(c, TrainMode::Inference)?;
    let test = images(c, "test", || s.plan.test_set())?;
    let enc = shared_encodings(&model, &test)?;
    let rows = prompt_sweep(&model, &test, Some(&enc), counts, s.plan.refiner.seed)?;
    write_report(c, "prompt_sweep", json!(rows), &sweep_table(&rows))
}

fn cmd_ablate(c: &Common, modules: &[String]) -> CliResult<()> {
    let s = setup(c)?;
    let (store, model, cfg) = load(c, TrainMode::Inference)?;
    let rows: Vec<ModuleSet> =
        if modules.is_empty() { ModuleSet::ablation_rows().to_vec() } else { modules.iter().map(|m| m.parse()).collect::<Result<_, _>>()? };
    let train = images(c, "train", || s.plan.train_set())?;
    let test = images(c, "test", || s.plan.test_set())?;
    let held = s.plan.heldout_set()?;
    let train_enc = shared_encodings(&model, &train)?;
    let test_enc = shared_encodings(&model, &test)?;
    let table = store_table(&store)?;
    let inputs = AblationInputs {
        cfg: &cfg,
        baseline: &table,
        train: &train,
        train_encodings: Some(&train_enc),
        heldout: &held,
        test: &test,
        test_encodings: Some(&test_enc),
        schedule: &s.plan.refiner,
        eval_seed: s.plan.refiner.seed,
    };
    let result = ablate(&inputs, &rows)?;
    write_report(c, "ablation", json!(result), &ablation_table(&result))
}

fn cmd_video(c: &Common, frames: Option<usize>) -> CliResult<()> {
    let mut s = setup(c)?;
    if let Some(t) = frames {
        s.plan.frames = t;
    }
    let (_, model, _) = load(c, TrainMode::Inference)?;
    let seqs = sequences(c, "video", || s.plan.video_set())?;
    let seed = s.plan.refiner.seed;
    let base = eval_video(&baseline_view(&model), &seqs, seed)?;
    let refined = eval_video(&model, &seqs, seed)?;
    let rows = vec![("baseline".to_string(), base), (format!("refined [{}]", model.modules()), refined)];
    write_report(c, "video", json!({ "baseline": base, "refined": refined }), &video_table(&rows))
}

fn cmd_infer(c: &Common, image: &Path, prompts: &Path) -> CliResult<()> {
    let out = need(&c.out, "out")?;
    let (_, model, cfg) = load(c, TrainMode::Inference)?;
    let (pixels, r) = load_image_png(image)?;
    if r != cfg.resolution {
        return Err(format!("image is {r}x{r}, the checkpoint expects {0}x{0}", cfg.resolution).into());
    }
    let p: PromptSet = serde_json::from_str(&fs::read_to_string(prompts)?)?;
    p.validate(r)?;
    let img = Tensor::from_vec(pixels, (1, 3, r, r), &Device::Cpu)?;
    let outp = model.forward_image(&img, &p)?;
    let mask = logits_to_mask(&outp.final_logits)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_mask_png(&mask, out)?;
    println!("mask written to {} ({} foreground pixels)", out.display(), mask.area());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenerateData(c) => generate(c),
        Command::TrainBaseline(c) => cmd_train_baseline(c),
        Command::TrainRefiner { common, modules } => cmd_train_refiner(common, modules),
        Command::Eval { common, prompt } => cmd_eval(common, prompt),
        Command::PromptSweep { common, counts } => cmd_sweep(common, counts),
        Command::Ablate { common, modules } => cmd_ablate(common, modules),
        Command::EvalVideo { common, frames } => cmd_video(common, *frames),
        Command::Infer { common, image, prompts } => cmd_infer(common, image, prompts),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
