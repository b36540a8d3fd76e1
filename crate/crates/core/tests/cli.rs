use std::path::Path;
use std::process::{Command, Output};

use latentmark::harness::{read_grid, ExperimentConfig, RunManifest};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentmark")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_small_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::desk();
    cfg.images = 2;
    cfg.optimizer.iterations = 6;
    cfg.codec.corpus_size = 256;
    let p = dir.join("small.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_nonzero() {
    let none = cli(&[]);
    assert!(!none.status.success());
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert!(!cli(&["frobnicate"]).status.success());
    assert!(!cli(&["gradcheck", "--bogus"]).status.success());
    assert!(cli(&["--help"]).status.success());
}

#[test]
fn gradcheck_reports_agreement() {
    let o = cli(&["gradcheck"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let cosine: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("cosine "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(cosine >= 0.999);
    let j = json(&cli(&["--format", "json", "gradcheck", "--fd-coordinates", "4"]));
    assert!(j["cosine"].as_f64().unwrap() >= 0.999);
    assert_eq!(j["fd_coordinates"], 4);
}

#[test]
fn decode_of_clean_latents_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cli(&["--out", out, "generate", "--images", "12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = cli(&["--out", out, "calibrate"]);
    assert!(c.status.success());
    let carriers = dir.path().join("carriers.bin");
    let mut total = 0.0;
    for i in 0..12 {
        let latent = dir.path().join(format!("clean_{i:03}.grid"));
        let j = json(&cli(&[
            "--seed",
            &(1000 + i).to_string(),
            "--format",
            "json",
            "decode",
            latent.to_str().unwrap(),
            "--carriers",
            carriers.to_str().unwrap(),
        ]));
        total += j["bit_accuracy"].as_f64().unwrap();
    }
    let mean = total / 12.0;
    assert!((0.3..=0.7).contains(&mean), "mean clean accuracy {mean}");
    let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    manifest.verify().unwrap();
}

#[test]
fn attack_writes_one_grid_per_attack() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(cli(&["--out", out, "generate", "--images", "1"]).status.success());
    let input = dir.path().join("clean_000.grid");
    let o = cli(&["--out", out, "attack", input.to_str().unwrap(), "--spec", r#"{"kind":"hflip"}"#]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let flipped = read_grid(&dir.path().join("clean_000_hflip.grid")).unwrap();
    let orig = read_grid(&input).unwrap();
    assert_eq!(flipped.get(0, 0, 0), orig.get(0, 0, 7));
    let bad = cli(&["--out", out, "attack", input.to_str().unwrap(), "--spec", r#"{"kind":"resize","scale":4}"#]);
    assert!(!bad.status.success());
}

#[test]
fn evaluate_and_embed_write_tracked_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = dir.path().join("eval");
    let o = cli(&["--config", &cfg, "--out", out.to_str().unwrap(), "evaluate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("attack,category,images,mean_bit_accuracy,tpr"));
    for f in ["report.csv", "report.json", "accuracy.svg", "loss.svg", "carriers.bin", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    manifest.verify().unwrap();
    assert!(manifest.artifacts.iter().any(|a| a.role == "watermarks"));
    assert!(manifest.wall_seconds >= 0.0);

    let emb = dir.path().join("embed");
    let j = json(&cli(&["--config", &cfg, "--out", emb.to_str().unwrap(), "--format", "json", "embed", "--images", "1"]));
    assert_eq!(j.as_array().unwrap().len(), 1);
    assert!(emb.join("embed_000.grid").exists());
}

#[test]
fn guidance_profile_runs_with_default_condition() {
    let j = json(&cli(&["--format", "json", "profile-guidance", "--trajectories", "3"]));
    assert_eq!(j["profile"].as_array().unwrap().len(), 20);
    assert!(j["early_mean"].as_f64().unwrap() >= 0.0);
}
