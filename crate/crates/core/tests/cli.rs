use std::path::Path;
use std::process::{Command, Output};

use ssta_core::cam::read_grid_file;
use ssta_core::data::{read_split, split_dir};
use ssta_core::train::{mask_path, queries_path, QuerySummary};

fn ssta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssta"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ssta(&["generate-data", "--out", p(&data), "--num-train", "4", "--num-val", "2", "--seed", "3", "--shift", "fog"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let src = read_split(&split_dir(&data, "source", "train")).unwrap();
    let tgt = read_split(&split_dir(&data, "target", "train")).unwrap();
    assert_eq!(src.len(), 4);
    assert_eq!(src.records, tgt.records);
    assert_ne!(src.images, tgt.images);

    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"mode": "ta", "epochs": 2, "warmup_epochs": 1, "batch_size": 2}"#).unwrap();
    let run = dir.path().join("run");
    let out = ssta(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run), "--mode", "ssta"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["mode"], "ssta");
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,l_det,l_da_c,l_da_e,total"));
    assert_eq!(csv.lines().count(), 3);
    assert!(run.join("report.json").exists());

    let ckpt = run.join("checkpoint.safetensors");
    let out = ssta(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "val", "--domain", "target"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["num_images"], 2);
    let map = eval["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let image = split_dir(&data, "source", "val").join("images/000004.ppm");
    let cam = dir.path().join("cam.txt");
    let out = ssta(&["export-cam", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&cam)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&cam).unwrap();
    assert_eq!(text.lines().next(), Some("8 8"));
    let (shape, values) = read_grid_file(&cam).unwrap();
    assert_eq!(shape, (8, 8));
    assert_eq!(values.len(), 64);
    assert!(values.iter().all(|v| *v >= 0.0));
    assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let (_, mask) = read_grid_file(&mask_path(&cam)).unwrap();
    assert!(mask.iter().all(|v| *v == 0.0 || *v == 1.0));
    assert!(mask.contains(&1.0));
    let queries: Vec<QuerySummary> = serde_json::from_str(&std::fs::read_to_string(queries_path(&cam)).unwrap()).unwrap();
    assert_eq!(queries.len(), 20);
    assert!(queries.iter().all(|q| (q.mass - 1.0).abs() < 1e-5));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage errors
    assert_eq!(ssta(&[]).status.code(), Some(1));
    assert_eq!(ssta(&["train", "--data"]).status.code(), Some(1));
    assert_eq!(ssta(&["--help"]).status.code(), Some(0));
    let out = ssta(&["generate-data", "--out", p(dir.path()), "--shift", "smog"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ssta(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--mode", "dann"]);
    assert_eq!(out.status.code(), Some(1));
    // data errors
    let missing = dir.path().join("nothing");
    let out = ssta(&["train", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = ssta(&["evaluate", "--checkpoint", p(&missing.join("c.safetensors")), "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.ppm");
    std::fs::write(&bad, b"P6\n4 4\n255\nxx").unwrap();
    let sidecar_less = dir.path().join("x.safetensors");
    let out = ssta(&["export-cam", "--checkpoint", p(&sidecar_less), "--image", p(&bad), "--out", p(&dir.path().join("c.txt"))]);
    assert_eq!(out.status.code(), Some(2));
}
