use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csr_core::capture::read_capture;
use csr_core::merge::MergePlan;
use csr_core::neural_dict::read_csrd;
use tempfile::TempDir;

fn csr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csr")).args(args).env_remove("CSR_THREADS").output().expect("spawn csr")
}

fn ok(args: &[&str]) -> String {
    let out = csr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small planted capture plus a trained dictionary in `dir`.
fn pipeline(dir: &Path, head_dim: u32) -> (String, String) {
    let cap = p(dir, "c.csrc");
    let hd = head_dim.to_string();
    ok(&["synth", "--out", &cap, "--layers", "2", "--heads", "2", "--head-dim", &hd, "--tokens", "300", "--seed", "3"]);
    let tr = dir.join("train");
    ok(&["train", "--capture", &cap, "--out-dir", tr.to_str().unwrap(), "--atoms", "64", "--epochs", "2"]);
    (cap, tr.join("dictionary.csrd").to_str().unwrap().to_string())
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&csr(&["--help"])), 0);
    for sub in ["synth", "merge-plan", "train", "compress", "eval", "ablate"] {
        assert_eq!(code(&csr(&[sub, "--help"])), 0, "{sub}");
    }
}

#[test]
fn synth_is_deterministic_and_echoes_spec() {
    let t = TempDir::new().unwrap();
    let (a, b) = (p(t.path(), "a.csrc"), p(t.path(), "b.csrc"));
    ok(&["synth", "--generator", "planted", "--seed", "7", "--out", &a]);
    ok(&["synth", "--generator", "planted", "--seed", "7", "--out", &b]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let spec = json(format!("{a}.config.json"));
    assert_eq!(spec["seed"], 7);
    assert_eq!(spec["generator"]["type"], "planted_dictionary");
    let leftovers: Vec<PathBuf> = std::fs::read_dir(t.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(leftovers.len(), 4, "temporary files left behind: {leftovers:?}");
}

#[test]
fn synth_rejects_bad_spec() {
    let t = TempDir::new().unwrap();
    let out = csr(&["synth", "--layers", "0", "--out", &p(t.path(), "x.csrc")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers"));
    assert!(!t.path().join("x.csrc").exists());
    let out = csr(&["synth", "--generator", "mixture", "--atoms", "4", "--out", &p(t.path(), "y.csrc")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn merge_plan_groups_and_thresholds() {
    let t = TempDir::new().unwrap();
    let cap = p(t.path(), "drift.csrc");
    ok(&[
        "synth",
        "--generator",
        "drift",
        "--drift-rate",
        "0",
        "--layers",
        "4",
        "--heads",
        "2",
        "--head-dim",
        "16",
        "--tokens",
        "5000",
        "--out",
        &cap,
    ]);
    let plan_path = p(t.path(), "plan.json");
    ok(&["merge-plan", "--capture", &cap, "--out", &plan_path]);
    let plan: MergePlan = serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    plan.validate(4).unwrap();
    assert_eq!(plan.groups, vec![vec![0, 1, 2, 3]]);
    assert_eq!((plan.delta1, plan.delta2), (0.20, 1.0));

    let single = p(t.path(), "single.json");
    ok(&["merge-plan", "--capture", &cap, "--out", &single, "--delta1", "0"]);
    let plan: MergePlan = serde_json::from_str(&std::fs::read_to_string(&single).unwrap()).unwrap();
    assert_eq!(plan.groups, vec![vec![0], vec![1], vec![2], vec![3]]);
    assert_eq!(json(format!("{single}.config.json"))["merge"]["delta1"], 0.0);

    // the default synthetic capture is readable too
    let default_cap = p(t.path(), "default.csrc");
    ok(&["synth", "--out", &default_cap]);
    ok(&["merge-plan", "--capture", &default_cap, "--out", &p(t.path(), "d.json")]);
}

#[test]
fn unreadable_capture_exits_3() {
    let t = TempDir::new().unwrap();
    let junk = p(t.path(), "junk.csrc");
    std::fs::write(&junk, b"not a capture").unwrap();
    for cap in [junk.as_str(), "/nonexistent/c.csrc"] {
        let out = csr(&["merge-plan", "--capture", cap, "--out", &p(t.path(), "plan.json")]);
        assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn train_outputs_and_determinism() {
    let t = TempDir::new().unwrap();
    let cap = p(t.path(), "c.csrc");
    ok(&[
        "synth",
        "--out",
        &cap,
        "--layers",
        "2",
        "--heads",
        "1",
        "--head-dim",
        "16",
        "--tokens",
        "1000",
        "--atoms",
        "32",
    ]);
    let run = |name: &str, epochs: &str| {
        let dir = t.path().join(name);
        ok(&[
            "train",
            "--capture",
            &cap,
            "--out-dir",
            dir.to_str().unwrap(),
            "--atoms",
            "32",
            "--epochs",
            epochs,
            "--lr",
            "0.05",
            "--batch-size",
            "32",
        ]);
        dir
    };
    let a = run("a", "5");
    let b = run("b", "5");
    assert_eq!(std::fs::read(a.join("dictionary.csrd")).unwrap(), std::fs::read(b.join("dictionary.csrd")).unwrap());
    let dict = read_csrd(std::fs::File::open(a.join("dictionary.csrd")).unwrap()).unwrap();
    assert_eq!(dict.entries().len(), 2);
    let report = json(a.join("train_report.json"));
    for e in report["entries"].as_array().unwrap() {
        let train = e["train_mse"].as_array().unwrap();
        assert!(train.last().unwrap().as_f64().unwrap() < e["initial_train_mse"].as_f64().unwrap());
    }
    let echo = json(a.join("config.json"));
    assert_eq!(echo["train"]["epochs"], 5);
    assert_eq!(echo["train"]["num_atoms"], 32);

    let init = run("init", "0");
    let report = json(init.join("train_report.json"));
    assert!(report["entries"][0]["train_mse"].as_array().unwrap().is_empty());
}

#[test]
fn train_plan_mismatch_exits_4() {
    let t = TempDir::new().unwrap();
    let cap = p(t.path(), "c.csrc");
    ok(&["synth", "--out", &cap, "--layers", "3", "--heads", "1", "--head-dim", "8", "--tokens", "100"]);
    let plan = p(t.path(), "plan.json");
    std::fs::write(&plan, r#"{"kind":"Key","delta1":0.2,"delta2":1.0,"groups":[[0,1]]}"#).unwrap();
    let out = csr(&["train", "--capture", &cap, "--plan", &plan, "--out-dir", &p(t.path(), "o")]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_and_unknown_keys() {
    let t = TempDir::new().unwrap();
    let bad = p(t.path(), "bad.json");
    std::fs::write(&bad, r#"{"codec": {"s": 4, "bits": 2}}"#).unwrap();
    let out = csr(&["compress", "--config", &bad]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bits"));

    let (cap, dict) = pipeline(t.path(), 16);
    let cfg = p(t.path(), "run.json");
    let out_dir = p(t.path(), "cmp");
    std::fs::write(
        &cfg,
        serde_json::json!({ "codec": { "s": 4 }, "online_size": 8, "paths": { "capture": cap, "dictionary": dict, "out": out_dir } })
            .to_string(),
    )
    .unwrap();
    ok(&["compress", "--config", &cfg, "--s", "2"]);
    let echo = json(Path::new(&out_dir).join("config.json"));
    assert_eq!(echo["codec"]["s"], 2);
    assert_eq!(echo["codec"]["s_n"], 1);
    assert_eq!(echo["online_size"], 8);
}

#[test]
fn compress_report_and_snapshot_eval() {
    let t = TempDir::new().unwrap();
    let (cap, dict) = pipeline(t.path(), 128);
    let cmp = t.path().join("cmp");
    ok(&["compress", "--capture", &cap, "--dict", &dict, "--out-dir", cmp.to_str().unwrap(), "--s", "8", "--sn", "1"]);
    let report = json(cmp.join("memory_report.json"));
    assert_eq!(report["memory"]["equivalent_bits_per_channel"], 2.0);
    assert!(report["memory"]["bytes_online_dict"].as_u64().unwrap() > 0);

    let none = t.path().join("none");
    ok(&["compress", "--capture", &cap, "--dict", &dict, "--out-dir", none.to_str().unwrap(), "--online-size", "0"]);
    assert_eq!(json(none.join("memory_report.json"))["memory"]["bytes_online_dict"], 0);

    let ev = t.path().join("ev");
    let snap = cmp.join("cache.csrs");
    ok(&[
        "eval",
        "--snapshot",
        snap.to_str().unwrap(),
        "--capture",
        &cap,
        "--dict",
        &dict,
        "--out-dir",
        ev.to_str().unwrap(),
    ]);
    let r = json(ev.join("report.json"));
    assert_eq!(r["lanes"].as_array().unwrap().len(), 4);
    assert!(r["lanes"][0]["mean_cosine"].as_f64().unwrap() > 0.5);

    // a dictionary file is not a snapshot
    let out = csr(&["eval", "--snapshot", &dict, "--dict", &dict, "--out-dir", ev.to_str().unwrap()]);
    assert_eq!(code(&out), 6, "{}", String::from_utf8_lossy(&out.stderr));
    // nor is a snapshot a dictionary
    let out = csr(&["eval", "--capture", &cap, "--dict", snap.to_str().unwrap(), "--out-dir", ev.to_str().unwrap()]);
    assert_eq!(code(&out), 6);
}

#[test]
fn compress_overflow_exits_5() {
    let t = TempDir::new().unwrap();
    let (cap, dict) = pipeline(t.path(), 16);
    let out = csr(&[
        "compress",
        "--capture",
        &cap,
        "--dict",
        &dict,
        "--out-dir",
        &p(t.path(), "o"),
        "--online-size",
        "65500",
    ]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("65536"));
}

#[test]
fn eval_sweep_outputs() {
    let t = TempDir::new().unwrap();
    let (cap, dict) = pipeline(t.path(), 16);
    let ev = t.path().join("ev");
    ok(&[
        "eval",
        "--capture",
        &cap,
        "--dict",
        &dict,
        "--out-dir",
        ev.to_str().unwrap(),
        "--sweep-s",
        "1,2,4,8",
        "--attention",
        "--footprint-lengths",
        "128,4096",
    ]);
    let sweep = std::fs::read_to_string(ev.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next().unwrap(), csr_core::eval::SWEEP_CSV_HEADER);
    let mse: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(mse.len(), 4);
    assert!(mse.windows(2).all(|w| w[1] <= w[0]), "{mse:?}");
    let lanes = std::fs::read_to_string(ev.join("lanes.csv")).unwrap();
    assert_eq!(lanes.lines().next().unwrap(), csr_core::eval::LANES_CSV_HEADER);
    let fp = std::fs::read_to_string(ev.join("footprint.csv")).unwrap();
    assert_eq!(fp.lines().next().unwrap(), csr_core::eval::FOOTPRINT_CSV_HEADER);
    assert!(json(ev.join("report.json"))["sweep"][0]["attention_cosine"].is_number());
}

#[test]
fn eval_lossless_cosine() {
    // Many pursuit iterations in an 8-dimensional space drive the residual to zero.
    let t = TempDir::new().unwrap();
    let (cap, dict) = pipeline(t.path(), 8);
    let ev = t.path().join("ev");
    ok(&[
        "eval",
        "--capture",
        &cap,
        "--dict",
        &dict,
        "--out-dir",
        ev.to_str().unwrap(),
        "--sweep-s",
        "64",
        "--attention",
    ]);
    let r = json(ev.join("report.json"));
    assert!((r["sweep"][0]["mean_cosine"].as_f64().unwrap() - 1.0).abs() < 1e-4);
    assert!((r["sweep"][0]["attention_cosine"].as_f64().unwrap() - 1.0).abs() < 1e-4);
}

#[test]
fn threads_flag_and_env() {
    let t = TempDir::new().unwrap();
    let out = csr(&["--threads", "0", "synth", "--out", &p(t.path(), "a.csrc")]);
    assert_eq!(code(&out), 2);
    ok(&["--threads", "2", "synth", "--out", &p(t.path(), "b.csrc"), "--tokens", "10"]);
    let out = Command::new(env!("CARGO_BIN_EXE_csr"))
        .args(["synth", "--out", &p(t.path(), "c.csrc"), "--tokens", "10"])
        .env("CSR_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(t.path().join("b.csrc")).unwrap(), std::fs::read(t.path().join("c.csrc")).unwrap());
}

#[test]
fn synth_capture_header_matches_flags() {
    let t = TempDir::new().unwrap();
    let cap = p(t.path(), "v.csrc");
    ok(&[
        "synth",
        "--out",
        &cap,
        "--kind",
        "value",
        "--layers",
        "3",
        "--heads",
        "2",
        "--head-dim",
        "8",
        "--tokens",
        "5",
    ]);
    let ds = read_capture(std::fs::File::open(&cap).unwrap()).unwrap();
    assert_eq!(ds.header().num_layers, 3);
    assert_eq!(ds.header().kind, csr_core::CacheKind::Value);
    assert_eq!(ds.total_vectors(), 30);
}

#[test]
fn ablate_reference_seed_passes() {
    let t = TempDir::new().unwrap();
    let stdout = ok(&["ablate", "--seed", "0", "--out-dir", t.path().to_str().unwrap()]);
    let r = json(t.path().join("ablation.json"));
    let names: Vec<&str> = r["ablations"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["dictionary_size", "value_chunking", "diversity_term", "online_part"]);
    assert_eq!(r["passed"], true);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}
