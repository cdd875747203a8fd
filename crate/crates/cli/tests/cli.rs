use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dualpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualpl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "data": {"classes": 3, "height": 16, "width": 16, "n_source": 6, "n_target": 6, "regions": 6},
  "bank_size": 9,
  "policy": {"interval": 5},
  "iterations": 20,
  "eval_interval": 10
}"#;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("c.json");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("d");
    let o = dualpl(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "run_manifest.json", "config.json", "source/image_00005.bin", "target/labels_00000.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let run: Value = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seeds"]["data"], 7);
    assert!(run["versions"]["core"].is_string());

    let again = tmp.path().join("d2");
    let o = dualpl(&["gen-data", "--manifest", p(&out.join("run_manifest.json")), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "source/image_00003.bin", "target/image_00002.bin"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("nope.json");
    let o = dualpl(&["gen-data", "--config", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr(&o).lines().count(), 1);

    let unknown = tmp.path().join("u.json");
    fs::write(&unknown, r#"{"bank_sz": 10}"#).unwrap();
    assert_eq!(code(&dualpl(&["train", "--config", p(&unknown), "--out", p(&out)])), 2);

    let invalid = tmp.path().join("i.json");
    fs::write(&invalid, r#"{"tp": -1.0}"#).unwrap();
    assert_eq!(code(&dualpl(&["train", "--config", p(&invalid), "--out", p(&out)])), 2);

    let cfg = tiny_config(tmp.path());
    let o = dualpl(&["ablate", "--config", p(&cfg), "--grid", "learning_rate", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown ablation axis"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&dualpl(&[])), 1);
    assert_eq!(code(&dualpl(&["frobnicate"])), 1);
    let o = dualpl(&["train", "--config", "c.json", "--out", "o", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stderr(&o).lines().count(), 1);
    // neither --config nor --manifest
    assert_eq!(code(&dualpl(&["train", "--out", "o"])), 1);
}

#[test]
fn runtime_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a bank").unwrap();
    assert_eq!(code(&dualpl(&["inspect-bank", p(&junk)])), 3);
    let cfg = tiny_config(tmp.path());
    let o = dualpl(&["eval", "--checkpoint", p(&junk), "--config", p(&cfg)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_rerun_from_manifest_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let o = dualpl(&["train", "--config", p(&cfg), "--out", p(&a), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "checkpoint.bin", "bank.bin", "config.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let echoed: Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["tau"], 0.968);

    let b = tmp.path().join("b");
    let o = dualpl(&["train", "--manifest", p(&a.join("manifest.json")), "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,L_src,L_tgt,L_ins,L_overall,miou_target,iou_class_0,iou_class_1,iou_class_2"
    );
    let iters: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "10", "20"]);
    assert!(!csv.contains('\r'));

    // overrides and a manifest do not mix
    let o = dualpl(&["train", "--manifest", p(&a.join("manifest.json")), "--out", p(&b), "--seed", "1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_reads_generated_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = tmp.path().join("d");
    assert_eq!(code(&dualpl(&["gen-data", "--config", p(&cfg), "--out", p(&d)])), 0);
    let from_disk = tmp.path().join("x");
    let fresh = tmp.path().join("y");
    let o = dualpl(&["train", "--config", p(&cfg), "--out", p(&from_disk), "--data", p(&d)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&dualpl(&["train", "--config", p(&cfg), "--out", p(&fresh)])), 0);
    assert_eq!(
        fs::read(from_disk.join("metrics.csv")).unwrap(),
        fs::read(fresh.join("metrics.csv")).unwrap()
    );

    let o = dualpl(&["eval", "--checkpoint", p(&fresh.join("checkpoint.bin")), "--data", p(&d)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["images"], 6);
    assert_eq!(report["iou"].as_array().unwrap().len(), 3);
    // the last metrics row was computed on the same target split
    let csv = fs::read_to_string(fresh.join("metrics.csv")).unwrap();
    let last_miou: f64 = csv.lines().last().unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(report["miou"].as_f64().unwrap(), last_miou);

    let o = dualpl(&["inspect-bank", p(&fresh.join("bank.bin"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["size"], 9);
    let slots: Vec<u64> = stats["per_class"].as_array().unwrap().iter().map(|c| c["slots"].as_u64().unwrap()).collect();
    assert_eq!(slots, [3, 3, 3]);
    let via_ck = dualpl(&["inspect-bank", p(&fresh.join("checkpoint.bin"))]);
    assert_eq!(via_ck.stdout, o.stdout);
}

#[test]
fn ablate_writes_rows_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let o = dualpl(&["ablate", "--config", p(&cfg), "--grid", "phi", "--seeds", "0,1", "--iterations", "6", "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(a.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5 * 2);
    let variants: Vec<&str> = rows.iter().step_by(2).map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["0", "0.8", "0.9", "0.95", "1"]);
    assert!(a.join("runs/0.95/seed_1/metrics.csv").exists());

    // variants share every unswept field
    let m: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let base = &m["config"];
    assert_eq!(base["iterations"], 6);
    for v in m["ablation"]["variants"].as_array().unwrap() {
        let mut c = v["config"].clone();
        c["strategy"]["phi"] = base["strategy"]["phi"].clone();
        assert_eq!(&c, base);
    }

    let b = tmp.path().join("b");
    let o = dualpl(&["ablate", "--manifest", p(&a.join("manifest.json")), "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(a.join("comparison.csv")).unwrap(), fs::read(b.join("comparison.csv")).unwrap());
}

#[test]
fn ablate_components_has_six_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let o = dualpl(&["ablate", "--config", p(&cfg), "--grid", "components", "--seeds", "0", "--iterations", "5", "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(a.join("comparison.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(names, ["baseline", "I", "II", "III", "IV", "V"]);
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);
}

#[test]
fn regen_demo_reproduces_worked_pixel() {
    let o = dualpl(&["regen-demo", "--z", "0.7,0.3", "--q-alpha", "0.25,0.25,0.25,0.25", "--labels", "0,0,1,1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let get = |k: &str| -> Vec<f64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    assert_eq!(get("z_sc"), [0.7, 0.7, 0.3, 0.3]);
    assert_eq!(get("q_ga"), [0.5, 0.5]);
    for (a, b) in get("q_hat").iter().zip([0.35, 0.35, 0.15, 0.15]) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in get("z_hat").iter().zip([0.68, 0.32]) {
        assert!((a - b).abs() < 1e-12);
    }

    let r = dualpl(&["regen-demo", "--random", "3", "7", "--seed", "4"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(r.stdout, dualpl(&["regen-demo", "--random", "3", "7", "--seed", "4"]).stdout);

    let bad = dualpl(&["regen-demo", "--z", "0.7,0.3", "--q-alpha", "0.5,0.5", "--labels", "0,2"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn regen_demo_image_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("r");
    assert_eq!(code(&dualpl(&["train", "--config", p(&cfg), "--out", p(&run), "--iterations", "5"])), 0);
    let o = dualpl(&["regen-demo", "--checkpoint", p(&run.join("checkpoint.bin")), "--config", p(&cfg), "--index", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["height"], 16);
    assert_eq!(v["slots"], 9);
    assert_eq!(v["scale_fallback"].as_array().unwrap().len(), 256);
}
