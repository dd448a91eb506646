//! The `decsurf` binary end to end on synthetic blobs.

use std::path::Path;
use std::process::{Command, Output};

fn decsurf(dir: &Path, args: &[&str]) -> Output {
    let out = dir.display().to_string();
    Command::new(env!("CARGO_BIN_EXE_decsurf"))
        .args(args)
        .args([
            "--out",
            &out,
            "--set",
            "data.source=blobs",
            "--set",
            "model.preset=blobs-mlp",
            "--set",
            "train.epochs=15",
            "--set",
            "train.learning_rate=0.5",
            "--set",
            "train.batch_size=16",
        ])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(&decsurf(d.path(), &["train"]));
    for f in ["model.ckpt", "history.tsv", "timing.tsv", "train.manifest.toml", "checkpoints/epoch_010.ckpt"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let m = decision_surface::pipeline::RunManifest::load(&d.path().join("train.manifest.toml")).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.config.train.epochs, 15);
    let ckpt = std::fs::read(d.path().join("model.ckpt")).unwrap();
    assert_eq!(m.outputs["model.ckpt"], decision_surface::pipeline::sha256_hex(&ckpt));
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&decsurf(a.path(), &["train", "--set", "train.mode=jacobian_reg", "--set", "train.penalty=5"]));
    ok(&decsurf(b.path(), &["train", "--set", "train.mode=jacobian_reg", "--set", "train.penalty=5"]));
    for f in ["model.ckpt", "history.tsv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    ok(&decsurf(c.path(), &["train", "--set", "train.mode=jacobian_reg", "--set", "train.penalty=5", "--set", "run.seed=1"]));
    assert_ne!(std::fs::read(a.path().join("model.ckpt")).unwrap(), std::fs::read(c.path().join("model.ckpt")).unwrap());
}

#[test]
fn unknown_mode_is_a_config_error_naming_the_field() {
    let d = tempfile::tempdir().unwrap();
    let o = decsurf(d.path(), &["train", "--set", "train.mode=gradient_descent"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.mode"));

    std::fs::write(d.path().join("bad.toml"), "[indicator]\nsamples = \"ten\"\n").unwrap();
    let cfg = d.path().join("bad.toml").display().to_string();
    let o = decsurf(d.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("indicator.samples"));
}

#[test]
fn attack_table_shape_and_orderings() {
    let d = tempfile::tempdir().unwrap();
    ok(&decsurf(d.path(), &["train"]));
    let table = ok(&decsurf(d.path(), &["attack", "--set", "attack.epsilons=[0.0, 0.05, 0.1, 0.2]"]));
    let lines: Vec<Vec<&str>> = table.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0][..6], ["model", "natural", "fgsm@0", "fgsm@0.05", "fgsm@0.1", "fgsm@0.2"]);
    assert_eq!(lines[0].len(), 2 + 3 * 4);
    let row: Vec<f64> = lines[1][1..].iter().map(|v| v.parse().unwrap()).collect();
    // epsilon 0 reproduces natural accuracy for every method.
    assert_eq!(row[1], row[0]);
    assert_eq!(row[5], row[0]);
    assert_eq!(row[9], row[0]);
    assert!(row[1..5].windows(2).all(|w| w[0] >= w[1]), "{row:?}");
    assert!(d.path().join("attack.manifest.toml").exists());

    let dflt = ok(&decsurf(d.path(), &["attack"]));
    assert_eq!(dflt.lines().next().unwrap().split('\t').skip(2).take(3).collect::<Vec<_>>(), ["fgsm@0.1", "fgsm@0.2", "fgsm@0.3"]);
}

#[test]
fn surface_writes_both_grids_and_rejects_parameter_attack_planes() {
    let d = tempfile::tempdir().unwrap();
    ok(&decsurf(d.path(), &["train"]));
    let out = ok(&decsurf(d.path(), &["surface", "--set", "surface.step=0.05"]));
    assert!(out.contains("first crossing"));
    let a = decision_surface::surface::read_grid(&d.path().join("surface_cross_entropy.grid")).unwrap();
    let b = decision_surface::surface::read_grid(&d.path().join("surface_decision_margin.grid")).unwrap();
    assert_eq!(a.meta.origin, b.meta.origin);
    assert_eq!(a.meta.beta_source, b.meta.beta_source);
    assert!(d.path().join("boundary.tsv").exists());

    let o = decsurf(d.path(), &["surface", "--set", "surface.space=parameter", "--set", "surface.beta=attack"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shape_mismatch_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    ok(&decsurf(d.path(), &["train"]));
    let ckpt = d.path().join("model.ckpt").display().to_string();
    let o = decsurf(d.path(), &["attack", "--checkpoint", &ckpt, "--set", "data.blobs_dim=3"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn indicator_compares_two_checkpoints_and_eval_runs_the_pipeline() {
    let d = tempfile::tempdir().unwrap();
    ok(&decsurf(d.path(), &["train"]));
    let a = d.path().join("checkpoints/epoch_005.ckpt");
    ok(&decsurf(d.path(), &["train", "--set", "train.checkpoint_every=5"]));
    let (a, b) = (a.display().to_string(), d.path().join("model.ckpt").display().to_string());
    let out = ok(&decsurf(d.path(), &["indicator", "--checkpoint", &b, "--checkpoint", &a, "--set", "indicator.samples=10"]));
    assert!(out.contains("mean_jacobian_l1"));
    let report = std::fs::read_to_string(d.path().join("indicator/model/report.txt")).unwrap();
    assert!(report.contains("jacobian_l1") && report.contains("hessian_zero_ratio"));
    assert!(d.path().join("indicator/ordering.txt").exists());

    let e = tempfile::tempdir().unwrap();
    ok(&decsurf(e.path(), &["eval", "--set", "indicator.samples=5", "--set", "indicator.images=false"]));
    for f in ["model.ckpt", "attack_table.tsv", "indicator/model/report.txt", "eval.manifest.toml"] {
        assert!(e.path().join(f).exists(), "{f}");
    }
}

#[test]
fn dense_hessian_cap_is_enforced() {
    let d = tempfile::tempdir().unwrap();
    ok(&decsurf(d.path(), &["train"]));
    let o = decsurf(d.path(), &["indicator", "--set", "indicator.hessian_cap=1", "--set", "indicator.samples=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("indicator.spectral"));
    ok(&decsurf(d.path(), &["indicator", "--set", "indicator.hessian_cap=1", "--set", "indicator.spectral=true", "--set", "indicator.samples=3", "--set", "indicator.top_k=2"]));
}
