use std::path::Path;
use std::process::Command;

const TINY: &str = "\
resolution=32
c4=8
c8=8
c16=16
c_embed=16
c_memory=8
c_low=4
heads=2
pool_kernels=1,2
refine_channels=8,8,8
bank_capacity=3
train_images=4
test_images=3
heldout_images=1
memory_sequences=1
video_sequences=2
frames=3
baseline_epochs=1
memory_epochs=1
refiner_epochs=1
baseline_batch_size=2
refiner_batch_size=2
";

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_finemask")).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "finemask {args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_subcommand_runs_on_a_tiny_setup() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |p: &str| tmp.path().join(p).to_str().unwrap().to_string();
    std::fs::write(d("tiny.cfg"), TINY).unwrap();
    let cfg = d("tiny.cfg");
    // Subcommand with the shared flags plus `extra`.
    let go = |sub: &str, out: &str, extra: &[&str]| {
        let out = d(out);
        let mut args = vec![sub, "--config", cfg.as_str(), "--seed", "3", "--out", out.as_str()];
        args.extend_from_slice(extra);
        run(&args)
    };

    go("generate-data", "data", &[]);
    assert!(Path::new(&d("data/train/manifest.jsonl")).exists());
    let first = std::fs::read_to_string(d("data/test/manifest.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["id", "image_path", "mask_path", "family", "seed"] {
        assert!(rec.get(key).is_some(), "manifest lacks {key}");
    }

    let data = d("data");
    go("train-baseline", "base", &["--data", &data]);
    assert!(Path::new(&d("base/manifest.txt")).exists() && Path::new(&d("base/weights.bin")).exists());

    let ck = d("base");
    go("train-refiner", "ref", &["--checkpoint", &ck, "--data", &data, "--modules", "la,pr,mr"]);
    let refined = d("ref");

    let table = go("eval", "eval", &["--checkpoint", &refined, "--data", &data]);
    assert!(table.contains("mIoU") && table.contains("baseline"));
    assert_eq!(json(&tmp.path().join("eval/eval.json"))["refined"]["samples"], 3);
    assert!(tmp.path().join("eval/eval.txt").exists());

    go("prompt-sweep", "sweep", &["--checkpoint", &refined, "--data", &data]);
    assert_eq!(json(&tmp.path().join("sweep/prompt_sweep.json")).as_array().unwrap().len(), 4);

    go("ablate", "ablate", &["--checkpoint", &ck, "--data", &data, "--modules", "la", "--modules", "pr,mr"]);
    assert_eq!(json(&tmp.path().join("ablate/ablation.json")).as_array().unwrap().len(), 2);

    go("eval-video", "video", &["--checkpoint", &refined, "--frames", "2"]);
    assert_eq!(json(&tmp.path().join("video/video.json"))["refined"]["frames"], 2);

    let image = d("data/test/images");
    let image = std::fs::read_dir(image).unwrap().next().unwrap().unwrap().path();
    std::fs::write(d("prompt.json"), r#"{"points":[{"x":10.0,"y":12.0,"label":"positive"}]}"#).unwrap();
    let mask = d("mask.png");
    run(&["infer", "--checkpoint", &refined, "--image", image.to_str().unwrap(), "--prompts", &d("prompt.json"), "--out", &mask]);
    assert!(Path::new(&mask).exists());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_finemask")).args(["eval"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}
