use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "train": {"epochs": 1, "steps_per_epoch": 2, "batch": 2},
  "synth": {"width": 64, "height": 64, "frames": 5, "train": 2, "eval": 2, "modalities": ["thermal"],
            "eval_degradations": [{"kind": "low_illumination", "severity": 0.9}], "train_degradations": []}
}"#;

fn patrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patrack"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PATRACK_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.json"), TINY).unwrap();
    d
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_reports_splits_and_is_deterministic() {
    let w = workdir();
    let a = ok(&patrack(&["synth", "--config", "c.json", "--out", "a"], w.path()));
    let b = ok(&patrack(&["synth", "--config", "c.json", "--out", "b"], w.path()));
    assert_eq!(a.replace("to a", ""), b.replace("to b", ""));
    assert!(a.contains("eval_low_illumination") && a.contains("attribute frames"), "{a}");
    let (sa, sb) = (snapshot(&w.path().join("a")), snapshot(&w.path().join("b")));
    assert!(sa.len() > 10);
    assert_eq!(sa, sb);
    let c = ok(&patrack(&["synth", "--config", "c.json", "--out", "c", "--seed", "5"], w.path()));
    assert!(!c.is_empty());
    assert_ne!(snapshot(&w.path().join("c")), sa);
}

#[test]
fn training_and_evaluation_are_byte_identical_on_rerun() {
    let w = workdir();
    ok(&patrack(&["synth", "--config", "c.json", "--out", "d"], w.path()));
    let mut logs = Vec::new();
    for tag in ["1", "2"] {
        let base = format!("base{tag}.patk");
        let full = format!("full{tag}.patk");
        let ev = format!("ev{tag}");
        logs.push(ok(&patrack(
            &["pretrain", "--config", "c.json", "--data", "d/train", "--out-checkpoint", &base],
            w.path(),
        )));
        logs.push(ok(&patrack(
            &[
                "train",
                "--config",
                "c.json",
                "--data",
                "d/train",
                "--init-checkpoint",
                &base,
                "--out-checkpoint",
                &full,
            ],
            w.path(),
        )));
        logs.push(ok(&patrack(
            &["eval", "--config", "c.json", "--checkpoint", &full, "--data", "d/eval_clean", "--out", &ev],
            w.path(),
        )));
    }
    let read = |p: &str| fs::read(w.path().join(p)).unwrap();
    assert_eq!(read("base1.patk"), read("base2.patk"));
    assert_eq!(read("full1.patk"), read("full2.patk"));
    assert_eq!(read("full1.patk.config.json"), read("full2.patk.config.json"));
    assert_eq!(snapshot(&w.path().join("ev1")), snapshot(&w.path().join("ev2")));
    assert_eq!(logs[0].replace("base1", "base2"), logs[3]);
    assert_eq!(logs[1].replace("full1", "full2"), logs[4]);
    assert_eq!(logs[2], logs[5]);
    assert!(logs[0].contains("epoch   1") && logs[0].contains("lr 4.000e-4"), "{}", logs[0]);
    for f in ["metrics.json", "success.csv", "precision.csv", "normalized_precision.csv", "config.json"] {
        assert!(w.path().join("ev1").join(f).is_file(), "{f}");
    }
}

#[test]
fn threaded_evaluation_matches_serial() {
    let w = workdir();
    ok(&patrack(&["synth", "--config", "c.json", "--out", "d"], w.path()));
    ok(&patrack(&["pretrain", "--config", "c.json", "--data", "d/train", "--out-checkpoint", "b.patk"], w.path()));
    let args = |out: &'static str| {
        vec!["eval", "--config", "c.json", "--checkpoint", "b.patk", "--data", "d/eval_clean", "--out", out]
    };
    ok(&patrack(&args("serial"), w.path()));
    let threaded = Command::new(env!("CARGO_BIN_EXE_patrack"))
        .args(args("threaded"))
        .current_dir(w.path())
        .env("PATRACK_THREADS", "2")
        .output()
        .unwrap();
    ok(&threaded);
    assert_eq!(snapshot(&w.path().join("serial")), snapshot(&w.path().join("threaded")));
}

#[test]
fn oracle_evaluation_scores_one() {
    let w = workdir();
    ok(&patrack(&["synth", "--config", "c.json", "--out", "d"], w.path()));
    ok(&patrack(&["eval", "--config", "c.json", "--oracle", "--data", "d/eval_clean", "--out", "o"], w.path()));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(w.path().join("o/metrics.json")).unwrap()).unwrap();
    for k in ["sr", "pr", "npr"] {
        assert_eq!(m["aggregate"][k].as_f64(), Some(1.0), "{k}");
    }
}

#[test]
fn params_json_reports_the_trainable_fraction() {
    let w = workdir();
    let out = ok(&patrack(&["params", "--json"], w.path()));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let total = v["total"].as_u64().unwrap();
    let trainable = v["trainable"].as_u64().unwrap();
    assert_eq!(v["frozen"].as_u64().unwrap() + trainable, total);
    let sum: u64 = v["components"].as_array().unwrap().iter().map(|c| c["params"].as_u64().unwrap()).sum();
    assert_eq!(sum, total);
    assert!((v["trainable_fraction"].as_f64().unwrap() - trainable as f64 / total as f64).abs() < 1e-12);
}

#[test]
fn entropy_writes_a_report() {
    let w = workdir();
    ok(&patrack(&["synth", "--config", "c.json", "--out", "d"], w.path()));
    let out = ok(&patrack(&["entropy", "--data", "d/eval_clean", "--json", "--out", "e.json"], w.path()));
    assert_eq!(out.as_bytes(), fs::read(w.path().join("e.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["rgb"]["mean_bits"].as_f64().unwrap() > v["thermal"]["mean_bits"].as_f64().unwrap());
}

#[test]
fn corrupted_gradients_exit_with_verification_failure() {
    let w = workdir();
    let out = patrack(&["gradcheck", "--samples", "2", "--corrupt-gradient", "1.01"], w.path());
    assert_eq!(out.status.code(), Some(6));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max rel err") && err.contains('['), "{err}");
}

#[test]
fn failures_map_to_exit_codes() {
    let w = workdir();
    let code = |args: &[&str]| patrack(args, w.path()).status.code();
    fs::write(w.path().join("bad.json"), r#"{"train": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(code(&["params", "--config", "bad.json"]), Some(2));
    assert_eq!(code(&["params", "--config", "missing.json"]), Some(3));
    assert_eq!(code(&["entropy", "--data", "nowhere"]), Some(3));
    ok(&patrack(&["synth", "--config", "c.json", "--out", "d"], w.path()));
    assert_eq!(
        code(&["train", "--config", "c.json", "--data", "d/train", "--out-checkpoint", "x.patk"]),
        Some(2)
    );
    fs::write(w.path().join("junk.patk"), b"junk").unwrap();
    assert_eq!(
        code(&["eval", "--checkpoint", "junk.patk", "--data", "d/train", "--out", "e"]),
        Some(5)
    );
    let threads = Command::new(env!("CARGO_BIN_EXE_patrack"))
        .args(["eval", "--oracle", "--data", "d/train", "--out", "e"])
        .current_dir(w.path())
        .env("PATRACK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}
