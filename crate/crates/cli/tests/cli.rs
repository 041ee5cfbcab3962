use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"n_scenes": 12, "n_sequences": 2, "sequence_length": 4, "synth": {"size": 32}},
  "views": {"out_size": [32, 32], "min_matches": 8},
  "model": {"stage_channels": [8, 8, 8], "fpn_dim": 8, "decoder_dim": 8, "emb_dim": 8},
  "loss": {"n_positive": 8, "queue_capacity": 64},
  "train": {"iterations": 4, "batch_size": 2, "checkpoint_every": 2},
  "eval": {"n_test": 4, "probe_epochs": 2}
}"#;

fn densecl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densecl"))
        .args(args)
        .env("DENSECL_LOG", "warn")
        .output()
        .expect("spawn densecl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_flag_exits_with_one() {
    let o = densecl(&["gen-data", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"iterashuns": 3}}"#).unwrap();
    let o = densecl(&["--config", s(&cfg), "--out", s(&tmp.path().join("d")), "gen-data"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = densecl(&["--config", s(&cfg), "probe", "--data", s(&tmp.path().join("nowhere"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let o = densecl(&["--config", s(&cfg), "--seed", seed, "--out", s(dir), "gen-data", "--n", "10"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
}

#[test]
fn train_then_probe_reports_miou() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&densecl(&["--config", s(&cfg), "--out", s(&data), "gen-data"])), 0);
    let o = densecl(&["--config", s(&cfg), "--out", s(&run), "train", "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("ckpt_000004.dclb");
    assert!(ckpt.exists());
    let o = densecl(&["probe", "--ckpt", s(&ckpt), "--data", s(&data), "--task", "seg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["name"], "miou");
    assert!(report["value"].as_f64().unwrap().is_finite());
    assert!(report["config_hash"].is_string());

    let o = densecl(&["--config", s(&cfg), "--seed", "9", "probe", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_query_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&densecl(&["--config", s(&cfg), "--out", s(&data), "gen-data"])), 0);
    let o = densecl(&["--config", s(&cfg), "retrieve", "--data", s(&data), "--query", "0:x:1"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}
