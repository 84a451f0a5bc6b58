use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/toy.json")
}

fn retrofit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retrofit")).args(args).output().unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn train(out: &Path, seed: u64) -> Value {
    ok_json(retrofit(&[
        "train",
        "--config",
        toy_config().to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]))
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let sa = train(&a, 2);
    train(&b, 2);
    for f in ["config.json", "metrics.csv", "checkpoint.json", "summary.json"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    for f in ["metrics.csv", "checkpoint.json", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# retrofit-metrics v1\nsplit,epoch,map,skipped_queries\n"));
    assert!(metrics.lines().last().unwrap().starts_with("test,"));
    let cfg: Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 2);
    assert_eq!(sa["seed"], 2);
}

#[test]
fn train_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = retrofit(&["train", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(toy_config()).unwrap()).unwrap();
    cfg["edges"] = dir.path().join("absent.edges").to_str().unwrap().into();
    cfg["embeddings"] = toy_config().with_file_name("toy.emb.txt").to_str().unwrap().into();
    let p = dir.path().join("bad.json");
    fs::write(&p, cfg.to_string()).unwrap();
    assert_eq!(retrofit(&["train", "--config", p.to_str().unwrap()]).status.code(), Some(2));

    cfg["edges"] = toy_config().with_file_name("toy.edges").to_str().unwrap().into();
    cfg["bogus_key"] = 1.into();
    fs::write(&p, cfg.to_string()).unwrap();
    assert_eq!(retrofit(&["train", "--config", p.to_str().unwrap()]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.emb.txt");
    fs::write(&garbage, "n00 1.0 zz\n").unwrap();
    cfg.as_object_mut().unwrap().remove("bogus_key");
    cfg["embeddings"] = garbage.to_str().unwrap().into();
    fs::write(&p, cfg.to_string()).unwrap();
    assert_eq!(retrofit(&["train", "--config", p.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn evaluate_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let summary = train(&run, 0);
    let cfg = run.join("config.json");
    let ckpt = run.join("checkpoint.json");
    let val = ok_json(retrofit(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "val",
    ]));
    assert!((val["map"].as_f64().unwrap() - summary["val_map"].as_f64().unwrap()).abs() <= 1e-12);
    let test = ok_json(retrofit(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]));
    assert!((test["map"].as_f64().unwrap() - summary["test_map"].as_f64().unwrap()).abs() <= 1e-12);
    let base = ok_json(retrofit(&["evaluate", "--config", cfg.to_str().unwrap(), "--identity"]));
    assert!((base["map"].as_f64().unwrap() - summary["source_test_map"].as_f64().unwrap()).abs() <= 1e-12);
    let bad = retrofit(&["evaluate", "--config", cfg.to_str().unwrap(), "--identity", "--split", "holdout"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn transform_maps_every_row_onto_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train(&run, 1);
    let out = dir.path().join("mapped.txt");
    let input = toy_config().with_file_name("toy.emb.txt");
    let report = ok_json(retrofit(&[
        "transform",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]));
    let rows_in = fs::read_to_string(&input).unwrap().lines().count();
    assert_eq!(report["rows_in"].as_u64().unwrap() as usize, rows_in);
    assert_eq!(report["rows_out"], report["rows_in"]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# manifold S4xH4");
    for line in lines {
        let v: Vec<f64> = line.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 9);
        let sphere: f64 = v[..5].iter().map(|x| x * x).sum();
        let ball: f64 = v[5..].iter().map(|x| x * x).sum();
        assert!((sphere - 1.0).abs() < 1e-9 && ball < 1.0, "{line}");
    }
}

#[test]
fn split_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let edges = toy_config().with_file_name("toy.edges");
    let a = dir.path().join("a.split");
    let b = dir.path().join("b.split");
    let ra = ok_json(retrofit(&["split", "--edges", edges.to_str().unwrap(), "--seed", "4", "--out", a.to_str().unwrap()]));
    ok_json(retrofit(&["split", "--edges", edges.to_str().unwrap(), "--seed", "4", "--out", b.to_str().unwrap()]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let nodes: u64 = ra["nodes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(nodes, 31);
    let bad = retrofit(&["split", "--edges", edges.to_str().unwrap(), "--ratios", "0.5,0.5,0.5", "--out", a.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn check_grad_detects_a_faulty_derivative() {
    let good = retrofit(&["check-grad"]);
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stdout));
    let bad = retrofit(&["check-grad", "--tanh-fault", "1.5"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAILED"));
}

#[test]
fn figure_data_writes_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fixture.json");
    fs::write(&cfg, r#"{"steps": 50}"#).unwrap();
    let out = dir.path().join("cycle");
    let summary = ok_json(retrofit(&[
        "figure-data",
        "--which",
        "cycle",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(summary["area_distortion_ratio"].as_f64().is_some());
    let points = fs::read_to_string(out.join("points.csv")).unwrap();
    assert!(points.starts_with("id,role,src_x,src_y,tgt_x,tgt_y\n"));
    assert!(fs::read_to_string(out.join("edges.csv")).unwrap().starts_with("source,target\n"));
    assert_eq!(fs::read_to_string(out.join("grid.csv")).unwrap().lines().count(), 1 + 21 * 21);
    let bad = retrofit(&["figure-data", "--which", "tree", "--variant", "explicit", "--target", "S2", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
