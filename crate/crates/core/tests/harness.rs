mod common;

use common::quick_config;
use latentmark::adjoint::WatermarkMode;
use latentmark::attacks::AttackSpec;
use latentmark::codec::matched_bits;
use latentmark::harness::report::CSV_HEADER;
use latentmark::harness::run::{persist_images, run_with_setup};
use latentmark::harness::{
    read_grid, write_report, ExperimentConfig, ImageResult, RobustnessReport, RunManifest, Setup,
};
use latentmark::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = quick_config();
    cfg.images = 3;
    cfg.optimizer.iterations = 8;
    cfg.attacks = vec![
        AttackSpec::Hflip,
        AttackSpec::Brightness { factor: 0.5 },
        AttackSpec::AdditiveNoise { std: 0.1, seed: 0 },
    ];
    cfg
}

#[test]
fn three_attacks_give_four_csv_rows_clean_first() {
    let cfg = small_config();
    let setup = Setup::build(&cfg).unwrap();
    let out = run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap();
    let csv = out.report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[1].starts_with("none,clean,3,"));
    assert_eq!(out.report.summary.len(), 4);
    assert_eq!(out.report.threshold, 15);
    for s in &out.report.summary {
        assert!((0.0..=1.0).contains(&s.mean_bit_accuracy) && (0.0..=1.0).contains(&s.tpr));
    }
    let back = RobustnessReport::from_json(&out.report.to_json()).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn explicit_none_is_folded_into_the_clean_row() {
    let mut cfg = small_config();
    cfg.images = 1;
    cfg.attacks = vec![AttackSpec::None, AttackSpec::Hflip];
    let setup = Setup::build(&cfg).unwrap();
    let report = run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap().report;
    assert_eq!(report.summary.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(), ["none", "hflip"]);
}

#[test]
fn runs_are_byte_identical() {
    let cfg = small_config();
    let a = {
        let setup = Setup::build(&cfg).unwrap();
        run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap().report
    };
    let b = {
        let setup = Setup::build(&cfg).unwrap();
        run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap().report
    };
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_json(), b.to_json());
    let mut other = cfg.clone();
    other.seed += 1;
    let setup = Setup::build(&other).unwrap();
    let c = run_with_setup(&other, &setup, WatermarkMode::Dual).unwrap().report;
    assert_ne!(a.config_digest, c.config_digest);
}

#[test]
fn persisted_latents_decode_to_reported_counts_and_manifest_tracks_them() {
    let cfg = small_config();
    let setup = Setup::build(&cfg).unwrap();
    let out = run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let persisted = persist_images(&out, &dir.path().join("images")).unwrap();
    let files = write_report(&out.report, dir.path()).unwrap();
    let mut manifest = RunManifest::start("test", &cfg);
    for p in &persisted {
        let result = &out.report.images[p.index];
        let message = result.message.as_ref().unwrap();
        for (j, path) in p.attacked.iter().enumerate() {
            let decoded = setup.decoder().decode(&read_grid(path).unwrap()).unwrap();
            assert_eq!(matched_bits(message, &decoded).unwrap(), result.matched[j]);
            manifest.record("attacked_latent", path).unwrap();
        }
        manifest.record("watermarks", &p.watermarks).unwrap();
    }
    for f in files.all() {
        assert!(f.exists());
        manifest.record("report", f).unwrap();
    }
    manifest.finish();
    let mpath = dir.path().join("manifest.json");
    manifest.write(&mpath).unwrap();
    let loaded = RunManifest::load(&mpath).unwrap();
    assert_eq!(loaded, manifest);
    assert!(loaded.artifacts.iter().all(|a| a.path.exists()));
    std::fs::write(&files.csv, "tampered").unwrap();
    assert!(matches!(loaded.verify(), Err(Error::Format { .. })));
    std::fs::remove_file(&files.csv).unwrap();
    assert!(matches!(loaded.write(&mpath), Err(Error::Io { .. })));
}

#[test]
fn report_to_unwritable_directory_is_an_io_error() {
    let mut cfg = small_config();
    cfg.images = 1;
    let setup = Setup::build(&cfg).unwrap();
    let report = run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(matches!(write_report(&report, &blocker.join("sub")), Err(Error::Io { .. })));
}

#[test]
fn majority_failure_aborts_and_failed_rows_are_excluded() {
    let mut cfg = small_config();
    cfg.watermark.sigma_td = 0.999;
    let setup = Setup::build(&cfg).unwrap();
    assert!(matches!(run_with_setup(&cfg, &setup, WatermarkMode::Dual), Err(Error::Report(_))));

    let cfg = small_config();
    let setup = Setup::build(&cfg).unwrap();
    let mut ok = run_with_setup(&cfg, &setup, WatermarkMode::Dual).unwrap().report;
    let mut images = ok.images.clone();
    images.push(ImageResult::failed(3, "diverged".into()));
    let mixed = RobustnessReport::assemble(&cfg, ok.attacks.clone(), images).unwrap();
    assert_eq!(mixed.failures(), 1);
    ok.images = mixed.images.clone();
    assert_eq!(mixed.summary, ok.summary);
    assert!(RobustnessReport::assemble(&cfg, ok.attacks.clone(), vec![ImageResult::failed(0, "x".into())]).is_err());
}

#[test]
fn config_file_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = \"nope\"").unwrap();
    match ExperimentConfig::load(&p) {
        Err(Error::Format { path, .. }) => assert_eq!(path, p),
        other => panic!("unexpected {other:?}"),
    }
    let mut cfg = ExperimentConfig::desk();
    cfg.attacks = vec![AttackSpec::Regenerate { t_a: 999, seed: 0 }];
    assert!(cfg.validate().is_err());
}
