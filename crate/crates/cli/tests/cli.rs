mod common;

use std::path::Path;
use std::process::{Command, Output};

use pixguide::dataset::{read_manifest, write_image, write_labels};
use pixguide::scene::{scene_at, BenchmarkEdit};
use pixguide_service::workspace::Workspace;

fn pixguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixguide"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    assert_eq!(pixguide(&["edit", "--bogus"]).status.code(), Some(1));
    assert_eq!(pixguide(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pixguide(&["--help"]).status.code(), Some(0));
    let out = pixguide(&[
        "estimate",
        "--model",
        "/nonexistent.ckpt",
        "--image",
        "x.png",
        "--out",
        "y.png",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn dataset_gen_and_empty_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = pixguide(&[
        "dataset",
        "gen",
        "--out",
        p(&data),
        "--size",
        "16",
        "--train",
        "3",
        "--annotated",
        "2",
        "--test",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = read_manifest(&data).unwrap();
    assert_eq!(
        m.splits.iter().map(|s| s.1.len()).collect::<Vec<_>>(),
        [3, 2, 1]
    );
    assert!(data.join("train").join("palette.json").exists());

    let report = dir.path().join("report");
    let out = pixguide(&["eval", "--n", "0", "--out", p(&report)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(v["cases"].as_array().unwrap().len(), 0);
}

#[test]
fn edit_writes_results_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (model, bank) = common::tiny_artifacts();
    let (mp, bp) = (dir.path().join("model.ckpt"), dir.path().join("bank.ckpt"));
    model.save(&mp).unwrap();
    bank.save(&bp).unwrap();
    let (x, y) = scene_at(&common::spec(), 3).unwrap();
    let y_edited = BenchmarkEdit::OpenMouth { px: 1 }.apply(&y).unwrap();
    let img = dir.path().join("a.png");
    write_image(&img, &x).unwrap();
    std::fs::create_dir_all(dir.path().join("maps")).unwrap();
    let src = dir.path().join("maps").join("source.png");
    let edited = dir.path().join("maps").join("edited.png");
    write_labels(&src, &y).unwrap();
    write_labels(&edited, &y_edited).unwrap();

    let out_dir = dir.path().join("result");
    let args = [
        "edit",
        "--model",
        p(&mp),
        "--bank",
        p(&bp),
        "--image",
        p(&img),
        "--map",
        p(&edited),
        "--source-map",
        p(&src),
        "--t0",
        "500",
        "--scale",
        "100",
        "--steps",
        "50",
        "--batch",
        "4",
        "--out",
        p(&out_dir),
    ];
    let out = pixguide(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(v["params"]["t0"], 500);
    assert_eq!(v["params"]["batch"], 4);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 4);
    for k in 0..4 {
        assert!(out_dir.join(format!("candidate_{k}.png")).exists());
        assert_eq!(v["candidates"][k]["metrics"]["mae_outside"], 0.0);
    }
    assert!(out_dir.join("edited.png").exists() && out_dir.join("trace.csv").exists());

    // Automatic parameters; the hires presets need more steps than the tiny schedule allows.
    let auto_dir = dir.path().join("auto");
    let out = pixguide(&[
        "edit",
        "--model",
        p(&mp),
        "--bank",
        p(&bp),
        "--image",
        p(&img),
        "--map",
        p(&edited),
        "--source-map",
        p(&src),
        "--auto-params",
        "--batch",
        "1",
        "--out",
        p(&auto_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(auto_dir.join("metrics.json").exists());

    let out = pixguide(&[
        "edit",
        "--model",
        p(&mp),
        "--bank",
        p(&bp),
        "--image",
        p(&img),
        "--map",
        p(&edited),
        "--out",
        p(&auto_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = pixguide(&[
        "edit",
        "--image",
        p(&img),
        "--map",
        p(&edited),
        "--t0",
        "5",
        "--out",
        "x",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn workspace_reopens_with_active_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (model, bank) = common::tiny_artifacts();
    let (mh, bh) = {
        let ws = Workspace::open(dir.path()).unwrap();
        (
            ws.install_model(model.clone()).unwrap(),
            ws.install_bank(bank).unwrap(),
        )
    };
    let ws = Workspace::open(dir.path()).unwrap();
    let a = ws.artifacts().unwrap();
    assert_eq!(a.model_hash, mh);
    assert_eq!(a.bank.as_ref().unwrap().1, bh);
    assert_eq!(a.model.net.params, model.net.params);
    // A new model drops classifiers trained on the old one.
    let mut other = model;
    other.sched = pixguide::diffusion::ScheduleConfig::linear(500)
        .build()
        .unwrap();
    ws.install_model(other).unwrap();
    assert!(ws.artifacts().unwrap().bank.is_none());
}
