use std::fs;
use std::path::PathBuf;

use arcnet_core::evaluation::evaluate_dir;
use arcnet_core::experiment::{restore_files, run_experiment, EvalPairing, ExperimentSpec};
use arcnet_core::image::save_image as write_png;
use arcnet_core::manifest::{list_images, DatasetManifest, Role};
use arcnet_core::network::{DiscriminatorSpec, GeneratorSpec, ModelBundle};
use arcnet_core::phantom;
use arcnet_core::training::{checkpoint_path, fit, read_log, TrainConfig, LOG_FILE};
use arcnet_core::Error;
use candle_core::Device;

fn save_image(img: &arcnet_core::FundusImage, path: impl AsRef<std::path::Path>) -> arcnet_core::Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_png(img, path)
}

const SIZE: usize = 32;

/// Four source pairs, four targets with references, and the manifests
/// describing them.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    source: PathBuf,
    target: PathBuf,
    eval: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    for i in 0..4u64 {
        let (clear, degraded) = phantom::simulated_pair(SIZE, SIZE, i);
        save_image(&clear, root.join(format!("clear/p{i}.png"))).unwrap();
        save_image(&degraded, root.join(format!("degraded/p{i}.png"))).unwrap();
        let reference = phantom::clear_fundus(SIZE, SIZE, 50 + i);
        let target = phantom::target_cataract(&reference, 50 + i);
        save_image(&target, root.join(format!("target/t{i}.png"))).unwrap();
        save_image(&reference, root.join(format!("reference/t{i}.png"))).unwrap();
    }
    let write = |name: &str, dirs: &[(&str, Role)]| {
        let path = root.join(name);
        DatasetManifest::scan(&root, dirs, 0).unwrap().save(&path).unwrap();
        path
    };
    let source = write("source.json", &[("clear", Role::SourceClear), ("degraded", Role::SourceDegraded)]);
    let target = write("target.json", &[("target", Role::Target)]);
    let eval = write("eval.json", &[("target", Role::Target), ("reference", Role::Reference)]);
    Fixture {
        _dir: dir,
        root,
        source,
        target,
        eval,
    }
}

fn tiny_config(f: &Fixture, out: &str) -> TrainConfig {
    TrainConfig {
        source_manifest: Some(f.source.clone()),
        target_manifest: Some(f.target.clone()),
        epochs: 2,
        phase1_epochs: 1,
        phase2_epochs: 1,
        batch_size: 3,
        crop: SIZE,
        resize_scales: vec![32, 36],
        checkpoint_every: 0,
        generator: GeneratorSpec {
            depth: 5,
            base_width: 4,
            max_width: 16,
            ..Default::default()
        },
        discriminator: DiscriminatorSpec {
            widths: vec![4, 8, 8, 8, 1],
            ..Default::default()
        },
        seed: 7,
        output_dir: f.root.join(out),
        ..Default::default()
    }
}

#[test]
fn fit_writes_one_log_row_per_step() {
    let f = fixture();
    let cfg = tiny_config(&f, "run");
    let ckpt = fit(&cfg, None).unwrap();
    // Four pairs at batch three: two steps per epoch.
    assert_eq!(ckpt, checkpoint_path(&cfg.output_dir, 4));
    let log = read_log(&cfg.output_dir.join(LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(log.iter().all(|r| r.non_finite_term().is_none()));
    let saved: TrainConfig =
        serde_json::from_str(&fs::read_to_string(cfg.output_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.fingerprint(), cfg.fingerprint());
    let bundle = ModelBundle::load(&ckpt, &Device::Cpu).unwrap();
    assert_eq!(bundle.step, 4);
    assert_eq!(bundle.fingerprint, cfg.fingerprint());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = fixture();
    let straight = TrainConfig {
        checkpoint_every: 2,
        ..tiny_config(&f, "straight")
    };
    fit(&straight, None).unwrap();

    let resumed = TrainConfig {
        checkpoint_every: 2,
        ..tiny_config(&f, "resumed")
    };
    // Output location is not part of the fingerprint, so the straight run's
    // mid-point checkpoint can seed a run in another directory.
    fs::create_dir_all(&resumed.output_dir).unwrap();
    let mid = checkpoint_path(&resumed.output_dir, 2);
    fs::copy(checkpoint_path(&straight.output_dir, 2), &mid).unwrap();
    let ckpt = fit(&resumed, Some(&mid)).unwrap();

    let a = read_log(&straight.output_dir.join(LOG_FILE)).unwrap();
    let b = read_log(&resumed.output_dir.join(LOG_FILE)).unwrap();
    assert_eq!(b.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 4]);
    for (x, y) in a[2..].iter().zip(&b) {
        assert!((x.total - y.total).abs() < 1e-6, "{x:?} vs {y:?}");
    }
    let fa = ModelBundle::load(&checkpoint_path(&straight.output_dir, 4), &Device::Cpu).unwrap();
    let fb = ModelBundle::load(&ckpt, &Device::Cpu).unwrap();
    assert_eq!(fa.step, fb.step);
    for (va, vb) in fa.generator.trainable().iter().zip(fb.generator.trainable()) {
        let d = (va.as_tensor() - vb.as_tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-6);
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let f = fixture();
    let cfg = tiny_config(&f, "a");
    let ckpt = fit(&cfg, None).unwrap();
    let other = TrainConfig {
        lr_phase1: 1e-3,
        ..tiny_config(&f, "b")
    };
    assert!(matches!(fit(&other, Some(&ckpt)), Err(Error::Config(_))));
}

fn spec(f: &Fixture, name: &str, flags: bool, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        source_manifest: f.source.clone(),
        target_manifest: f.target.clone(),
        use_hfc: flags,
        use_structure_loss: flags,
        use_domain_loss: flags,
        eval: EvalPairing {
            manifest: f.eval.clone(),
            input_role: Role::Target,
            reference_role: Role::Reference,
            mask_dir: None,
        },
        output_dir: f.root.join(format!("exp-{name}-{seed}")),
        seed,
        train: tiny_config(f, "unused"),
    }
}

#[test]
fn experiment_equals_train_restore_evaluate() {
    let f = fixture();
    let s = spec(&f, "full", true, 3);
    let out = run_experiment(&s).unwrap();
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out.result_json).unwrap()).unwrap();

    let cfg = TrainConfig {
        output_dir: f.root.join("manual"),
        ..s.train_config()
    };
    let ckpt = fit(&cfg, None).unwrap();
    let bundle = ModelBundle::load(&ckpt, &Device::Cpu).unwrap();
    let inputs: Vec<(String, PathBuf)> = list_images(&f.root.join("target"))
        .unwrap()
        .into_iter()
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    let restored = f.root.join("manual-restored");
    restore_files(&bundle, &inputs, &restored, cfg.crop).unwrap();
    let report = evaluate_dir(&restored, &f.root.join("reference"), None).unwrap();

    assert_eq!(report.rows.len(), 4);
    assert_eq!(result["n_pairs"], 4);
    assert_eq!(result["mean_ssim"].as_f64(), report.mean_ssim);
    assert_eq!(result["mean_psnr"].as_f64(), report.mean_psnr);
    assert_eq!(result["fingerprint"], cfg.fingerprint());
    assert!(out.report_csv.is_file() && out.result_csv.is_file());
}

#[test]
fn ablated_experiment_drops_guidance_and_extra_terms() {
    let f = fixture();
    let out = run_experiment(&spec(&f, "ablated", false, 3)).unwrap();
    let bundle = ModelBundle::load(&out.checkpoint, &Device::Cpu).unwrap();
    assert_eq!(bundle.spec.generator.in_channels, 3);
    assert!(bundle.guidance().is_none());
    let log = read_log(&out.checkpoint.parent().unwrap().join(LOG_FILE)).unwrap();
    assert!(!log.is_empty());
    assert!(log.iter().all(|r| r.l_s == 0.0 && r.l_d == 0.0));
}

#[test]
fn seeds_give_distinct_rows_with_one_fingerprint() {
    let f = fixture();
    let rows: Vec<serde_json::Value> = [1, 2]
        .iter()
        .map(|&seed| {
            let out = run_experiment(&spec(&f, "full", true, seed)).unwrap();
            serde_json::from_str(&fs::read_to_string(out.result_json).unwrap()).unwrap()
        })
        .collect();
    assert_eq!(rows[0]["fingerprint"], rows[1]["fingerprint"]);
    assert_ne!(rows[0]["seed"], rows[1]["seed"]);
    assert_ne!(rows[0], rows[1]);
}

#[test]
fn structure_loss_without_guidance_is_a_config_error() {
    let f = fixture();
    let s = ExperimentSpec {
        use_hfc: false,
        ..spec(&f, "bad", true, 1)
    };
    assert!(matches!(run_experiment(&s), Err(Error::Config(_))));
    assert!(!s.output_dir.exists());
}
