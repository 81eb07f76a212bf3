use std::path::Path;
use std::process::{Command, Output};

use regen::bench::BenchReport;
use regen::synth::write_scene_dataset;
use serde_json::Value;

fn regen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regen"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("regen runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = regen(dir, &full);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "regen {args:?} failed: {stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_str(stdout.trim()).expect("one JSON object on stdout");
    assert_eq!(v["status"], "ok");
    v["result"].clone()
}

const SMALL_TRAIN: &str = r#"
seed = 3

[train]
resolution = [32, 32]
epochs = 1
num_discriminator_scales = 1

[train.arch]
ngf = 4
n_downsample = 2
n_blocks = 1
local_enhancer = false
n_local_blocks = 0
ndf = 4
n_layers_d = 2
init_std = 0.02
"#;

#[test]
fn full_sequence_produces_a_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_scene_dataset(&d.join("src"), 6, (32, 32), 1, [1.0, 0.0, 0.0]).unwrap();
    std::fs::write(d.join("regen.toml"), SMALL_TRAIN).unwrap();
    let cfg = ["--config", "regen.toml"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> { cfg.iter().chain(extra).copied().collect() };

    let pairs = ok(d, &with(&["--out", "pairs", "pairs", "--source", "src/manifest.json"]));
    assert_eq!(pairs["count"], 6);
    let first = std::fs::read(d.join("pairs/pairs.json")).unwrap();
    ok(d, &with(&["--out", "pairs", "pairs", "--source", "src/manifest.json"]));
    assert_eq!(std::fs::read(d.join("pairs/pairs.json")).unwrap(), first, "pairs are re-runnable");

    let train = ok(d, &with(&["--out", "ckpt", "train", "--pairs", "pairs/pairs.json"]));
    assert_eq!(train["iterations"], 6);
    let weights = std::fs::read(d.join("ckpt/final.ckpt")).unwrap();
    ok(d, &with(&["--out", "ckpt2", "train", "--pairs", "pairs/pairs.json"]));
    assert_eq!(std::fs::read(d.join("ckpt2/final.ckpt")).unwrap(), weights, "training is deterministic");

    let export = ok(
        d,
        &with(&["--out", "model.onnx", "export", "--checkpoint", "ckpt/final.ckpt", "--probes", "3"]),
    );
    assert_eq!(export["passed"], true);
    assert!(d.join("model.spec.json").exists() && d.join("model.parity.json").exists());

    let eval = ok(
        d,
        &with(&[
            "--out",
            "metrics.json",
            "eval",
            "--generated",
            "gen",
            "--reference",
            "pairs/enhanced",
            "--checkpoint",
            "ckpt/final.ckpt",
            "--source",
            "src",
            "--kid-num-subsets",
            "5",
        ]),
    );
    assert!(eval["fid"].as_f64().unwrap() >= 0.0);
    assert_eq!(eval["n_generated"], 6);

    let bench_args = ["--resolution", "32x32", "--warmup", "5", "--iters", "30"];
    let mut teacher = with(&["--out", "teacher.json", "bench", "--teacher", "oracle"]);
    teacher.extend(bench_args);
    ok(d, &teacher);
    let mut student = with(&["--out", "student.json", "bench", "--model", "model.onnx", "--metrics", "metrics.json"]);
    student.extend(bench_args);
    let s = ok(d, &student);
    assert_eq!(s["method_name"], "student-onnx");
    let loaded = BenchReport::load(&d.join("student.json")).unwrap();
    assert_eq!(loaded.warmup_iters, 5);
    assert!(loaded.fid.is_some());

    let report = ok(
        d,
        &[
            "--out",
            "table.md",
            "report",
            "teacher.json",
            "student.json",
            "--speedup",
            "oracle-teacher:student-onnx",
        ],
    );
    let table = std::fs::read_to_string(d.join("table.md")).unwrap();
    assert!(table.starts_with("| Method | KID×100 | FID | ms/iter | Memory (GB) | FPS |"));
    assert!(table.contains("| oracle-teacher | -- | -- |"));
    assert!(table.contains("Speedup student-onnx vs oracle-teacher:"));
    assert_eq!(report["speedups"][0]["fast"], "student-onnx");

    // Reports written by the bench command round-trip through report unchanged.
    assert_eq!(report["rows"][1], serde_json::to_value(&loaded).unwrap());
}

#[test]
fn config_errors_name_the_field_and_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "[train]\nresolution = [100, 100]\n").unwrap();
    let out = regen(d, &["--json", "--config", "bad.toml", "report", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "error");
    assert_eq!(v["kind"], "config");
    assert_eq!(v["field"], "train.resolution");

    std::fs::write(d.join("typo.toml"), "[metrics]\nextractor = \"nope\"\n").unwrap();
    let out = regen(d, &["--config", "typo.toml", "report", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics.extractor"));
}

#[test]
fn runtime_errors_exit_with_1_and_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = regen(d, &["--json", "report", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["kind"], "io");

    let out = regen(d, &["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
}

#[test]
fn report_rejects_duplicate_method_names() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let r = BenchReport {
        method_name: "REGEN".into(),
        kid_x100: Some(3.38),
        fid: Some(39.62),
        ms_per_iter: 33.53,
        ms_p99: 35.0,
        memory_gb: Some(1.0),
        fps: 29.83,
        resolution: (960, 512),
        warmup_iters: 20,
        timed_iters: 200,
        environment: "RTX 4090".into(),
    };
    r.save(&d.join("a.json")).unwrap();
    let table = ok(d, &["report", "a.json"]);
    assert!(table["text"].as_str().unwrap().contains("| REGEN | 3.38 | 39.62 | 33.53 | 1.00 | 29.83 |"));
    let out = regen(d, &["--json", "report", "a.json", "a.json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["kind"], "duplicate_method");
}

#[test]
fn patches_accept_manifests_or_image_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_scene_dataset(&d.join("game"), 3, (48, 48), 1, [1.0, 0.0, 0.0]).unwrap();
    write_scene_dataset(&d.join("real"), 4, (48, 48), 2, [1.0, 0.0, 0.0]).unwrap();
    let args = ["--patch-size", "32", "--per-image", "2", "--k", "3", "--threshold", "-1"];
    let mut from_dirs = vec!["--out", "a.json", "patches", "--source", "game", "--target", "real"];
    from_dirs.extend(args);
    let r = ok(d, &from_dirs);
    assert_eq!(r["source_patches"], 6);
    assert_eq!(r["target_patches"], 8);
    assert_eq!(r["matched_source_patches"], 6);
    let mut from_manifests =
        vec!["--out", "b.json", "patches", "--source", "game/manifest.json", "--target", "real/manifest.json"];
    from_manifests.extend(args);
    ok(d, &from_manifests);
    let table: Value = serde_json::from_slice(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(table["entries"].as_array().unwrap().len(), 6);
    assert!(table["entries"][0]["neighbors"].as_array().unwrap().len() == 3);
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
}
