use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nasb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nasb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nasb(dir, args);
    assert!(
        out.status.success(),
        "nasb {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(dir: &Path, names: &[&str]) -> Vec<(String, Vec<u8>)> {
    names.iter().map(|n| (n.to_string(), fs::read(dir.join(n)).unwrap())).collect()
}

fn gen_data(dir: &Path, samples: &str) {
    ok(
        dir,
        &["gen-data", "--images", "d.ntsr", "--labels", "d.nlbl", "--samples", samples, "--seed", "3"],
    );
}

const DATA: [&str; 4] = ["--images", "d.ntsr", "--labels", "d.nlbl"];

fn with_data<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&DATA);
    v
}

#[test]
fn cost_resnet18_full_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["cost", "--arch", "resnet18", "--policy", "full", "--json", "-"]);
    let start = out.find('{').expect("json report on stdout");
    let v: serde_json::Value = serde_json::from_str(&out[start..]).unwrap();
    let mbit = v["memory_mbit"].as_f64().unwrap();
    let flops = v["flops"].as_f64().unwrap();
    assert!((mbit / 374.1 - 1.0).abs() <= 0.02, "memory {mbit}");
    assert!((flops / 1.81e9 - 1.0).abs() <= 0.02, "flops {flops}");
    assert!(!v["layers"].as_array().unwrap().is_empty());
    assert!(out.contains("memory") && out.contains("Mbit"));
}

#[test]
fn cost_json_file_and_options() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["cost", "--arch", "nasb-resnet18", "--json", "c.json"]);
    let a: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("c.json")).unwrap()).unwrap();
    ok(dir.path(), &["cost", "--arch", "nasb-resnet18", "--divisor", "32", "--json", "c2.json"]);
    let b: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("c2.json")).unwrap()).unwrap();
    assert_eq!(a["memory_bits"], b["memory_bits"]);
    assert!(b["flops"].as_f64().unwrap() > a["flops"].as_f64().unwrap());
    let bad = nasb(dir.path(), &["cost", "--arch", "resnet19"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["cost", "--arch", "resnet18", "--bogus"][..],
        &["derive", "--in", "x.ckpt"][..],
        &[][..],
    ] {
        let out = nasb(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn runtime_failure_is_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = nasb(dir.path(), &["eval", "--in", "missing.ckpt", "--images", "a", "--labels", "b"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("missing.ckpt"));
}

#[test]
fn derive_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "64");
    ok(d, &with_data(&["search", "--epochs", "1", "--out", "s.ckpt"]));
    ok(d, &["derive", "--variant", "nasb", "--in", "s.ckpt", "--out", "g.json"]);
    let first = fs::read(d.join("g.json")).unwrap();
    ok(d, &["derive", "--variant", "nasb", "--in", "s.ckpt", "--out", "g.json"]);
    assert_eq!(first, fs::read(d.join("g.json")).unwrap());
    ok(d, &["derive", "--variant", "v4", "--in", "s.ckpt", "--out", "g4.json"]);
    assert!(!String::from_utf8(fs::read(d.join("g4.json")).unwrap()).unwrap().contains("identity"));
}

#[test]
fn refuses_to_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "32");
    let before = snapshot(d, &["d.ntsr", "d.nlbl"]);
    let out = nasb(d, &["search", "--images", "d.ntsr", "--labels", "d.nlbl", "--epochs", "1", "--out", "d.ntsr"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(before, snapshot(d, &["d.ntsr", "d.nlbl"]));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "48");
    let cfg = r#"{
  "seed": 11,
  "search_data": { "images": "d.ntsr", "labels": "d.nlbl" },
  "train": { "epochs": 1, "batch_size": 16 }
}"#;
    fs::write(d.join("run.json"), cfg).unwrap();
    ok(d, &["--config", "run.json", "search", "--out", "a.ckpt"]);
    ok(d, &["--config", "run.json", "search", "--epochs", "2", "--out", "b.ckpt"]);
    let a: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a.summary.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&fs::read(d.join("b.summary.json")).unwrap()).unwrap();
    let epochs = |v: &serde_json::Value| {
        let recs = v["records"].as_array().unwrap();
        recs.iter().map(|r| r["epoch"].as_u64().unwrap()).max().unwrap() + 1
    };
    assert_eq!((epochs(&a), epochs(&b)), (1, 2));
    assert_eq!(fs::read(d.join("run.json")).unwrap(), cfg.as_bytes());
    let bad = nasb(d, &["--config", "run.json", "search", "--out", "run.json"]);
    assert_eq!(bad.status.code(), Some(1));
}

fn artifacts(d: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn pipeline(d: &Path) {
    gen_data(d, "160");
    ok(d, &with_data(&["search", "--epochs", "2", "--checkpoint-every", "1", "--seed", "5", "--out", "s.ckpt"]));
    ok(d, &["derive", "--in", "s.ckpt", "--out", "g.json"]);
    ok(d, &with_data(&["pretrain", "--genotype", "g.json", "--epochs", "2", "--seed", "5", "--out", "p.ckpt"]));
    ok(
        d,
        &with_data(&["finetune", "--in", "p.ckpt", "--genotype", "g.json", "--epochs", "2", "--seed", "5", "--out", "f.ckpt"]),
    );
    let out = ok(d, &with_data(&["eval", "--in", "f.ckpt", "--out", "e.json"]));
    assert!(out.contains("top-1"));
}

#[test]
fn full_pipeline_writes_artifacts_and_is_idempotent() {
    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    pipeline(one.path());
    let names: Vec<String> = artifacts(one.path())
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for n in [
        "d.ntsr", "d.nlbl", "s.ckpt", "s.csv", "s.summary.json", "s.epoch1.ckpt", "s.epoch2.ckpt", "g.json", "p.ckpt",
        "p.csv", "p.summary.json", "f.ckpt", "f.csv", "f.summary.json", "e.json",
    ] {
        assert!(names.iter().any(|x| x == n), "missing {n} in {names:?}");
    }
    assert!(!names.iter().any(|n| n.ends_with(".tmp")));
    assert_eq!(
        fs::read(one.path().join("s.epoch2.ckpt")).unwrap(),
        fs::read(one.path().join("s.ckpt")).unwrap()
    );
    let e: serde_json::Value = serde_json::from_slice(&fs::read(one.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(e["samples"], 160);
    assert_eq!(e["stage"], "finetune");

    // Same inputs and seeds in a fresh directory: every non-log byte matches.
    pipeline(two.path());
    for n in &names {
        if n.ends_with(".summary.json") {
            continue;
        }
        assert_eq!(
            fs::read(one.path().join(n)).unwrap(),
            fs::read(two.path().join(n)).unwrap(),
            "{n} differs between runs"
        );
    }

    // Re-running stages in place leaves their inputs untouched.
    let d = one.path();
    let inputs = ["d.ntsr", "d.nlbl", "s.ckpt", "g.json", "p.ckpt", "f.ckpt"];
    let before = snapshot(d, &inputs);
    ok(d, &["derive", "--in", "s.ckpt", "--out", "g2.json"]);
    ok(d, &with_data(&["eval", "--in", "p.ckpt"]));
    ok(d, &with_data(&["finetune", "--in", "p.ckpt", "--epochs", "1", "--out", "f2.ckpt"]));
    assert_eq!(before, snapshot(d, &inputs));
    assert_eq!(fs::read(d.join("g.json")).unwrap(), fs::read(d.join("g2.json")).unwrap());
}

#[test]
fn finetune_rejects_mismatched_genotype() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d, "32");
    ok(d, &with_data(&["search", "--epochs", "1", "--out", "s.ckpt"]));
    ok(d, &["derive", "--in", "s.ckpt", "--out", "g.json"]);
    ok(d, &["derive", "--variant", "v5", "--in", "s.ckpt", "--out", "g5.json"]);
    ok(d, &with_data(&["pretrain", "--genotype", "g.json", "--epochs", "1", "--out", "p.ckpt"]));
    let out = nasb(d, &with_data(&["finetune", "--in", "p.ckpt", "--genotype", "g5.json", "--out", "f.ckpt"]));
    assert_eq!(out.status.code(), Some(1));
    let out = nasb(d, &with_data(&["finetune", "--in", "s.ckpt", "--out", "f.ckpt"]));
    assert_eq!(out.status.code(), Some(1));
}
