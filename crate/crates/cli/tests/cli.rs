use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"unlabelled": 600, "labelled": 400},
  "wae": {"latent_dim": 4, "hidden": 16, "embed": 8, "epochs": 60, "batch_size": 32, "lr": 0.01},
  "surrogate": {"embed": 8, "hidden": 16, "conv1": 8, "conv2": 8, "epochs": 3, "batch_size": 64, "residual_bins": 4},
  "cmaes": {"iterations": 20, "batch": 50, "max_attempts": 5},
  "collector": {"top_n": 12, "clusters": 3, "count": 15, "max_iterations": 20, "batch": 50},
  "evaluation": {"gmm_components": 5, "gmm_max_iter": 50, "gmm_batch": 50, "gmm_max_batches": 20, "random_count": 15},
  "selection": {"top_n": 8, "gibbs": {"clusters": 2, "sweeps": 50, "restarts": 2}}
}"#;

fn lsatc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsatc"))
        .current_dir(dir)
        .env_remove("LSATC_OUT_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {stdout}");
    serde_json::from_str(lines[0]).expect("json summary")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    dir
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn sample_before_collect_names_missing_artifact() {
    let dir = setup();
    let out = lsatc(
        dir.path(),
        &["sample", "--config", "c.json", "--seed", "1", "--out-dir", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("missing artifact") && stderr.contains("collect"),
        "{stderr}"
    );
    assert_eq!(summary(&out)["status"], "error");
}

#[test]
fn validation_failures_exit_2() {
    let dir = setup();
    let no_seed = lsatc(dir.path(), &["gen-data", "--config", "c.json", "--out-dir", "o"]);
    assert_eq!(no_seed.status.code(), Some(2));
    let bad_path = lsatc(
        dir.path(),
        &["gen-data", "--seed", "1", "--set", "cmaes.bogus=1", "--out-dir", "o"],
    );
    assert_eq!(bad_path.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let bad_json = lsatc(
        dir.path(),
        &["gen-data", "--config", "bad.json", "--seed", "1", "--out-dir", "o"],
    );
    assert_eq!(bad_json.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn run_all_is_deterministic() {
    let dir = setup();
    for out_dir in ["a", "b"] {
        let out = lsatc(
            dir.path(),
            &["run-all", "--config", "c.json", "--seed", "7", "--out-dir", out_dir],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let s = summary(&out);
        let sets = s["summary"]["evaluate"].as_object().unwrap();
        assert_eq!(sets.keys().collect::<Vec<_>>(), ["gmm", "lsatc", "random"]);
    }
    let a = tree(&dir.path().join("a"));
    assert!(a.keys().any(|k| k.ends_with("select/final.json")));
    assert_eq!(a, tree(&dir.path().join("b")));
}

#[test]
fn stages_one_by_one_match_run_all_and_workers() {
    let dir = setup();
    let common = ["--config", "c.json", "--seed", "3"];
    let all = lsatc(dir.path(), &[&["run-all"], &common[..], &["--out-dir", "all"]].concat());
    assert_eq!(all.status.code(), Some(0));
    for cmd in [
        "gen-data",
        "train-wae",
        "train-surrogate",
        "optimize",
        "collect",
        "sample",
        "evaluate",
        "select-final",
    ] {
        let out = lsatc(
            dir.path(),
            &[&[cmd], &common[..], &["--out-dir", "steps", "--workers", "3"]].concat(),
        );
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(summary(&out)["command"], cmd);
    }
    assert_eq!(tree(&dir.path().join("all")), tree(&dir.path().join("steps")));
}

#[test]
fn mixed_config_hashes_are_refused_without_force() {
    let dir = setup();
    let base = ["--config", "c.json", "--seed", "5", "--out-dir", "o"];
    assert_eq!(
        lsatc(dir.path(), &[&["gen-data"], &base[..]].concat()).status.code(),
        Some(0)
    );
    let changed = [&["train-surrogate"], &base[..], &["--set", "surrogate.epochs=2"]].concat();
    let refused = lsatc(dir.path(), &changed);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("config hash"));
    let forced = lsatc(dir.path(), &[&changed[..], &["--force"]].concat());
    assert_eq!(
        forced.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&forced.stderr)
    );
    let run_all = lsatc(dir.path(), &[&["run-all"], &base[..], &["--set", "seed=6"]].concat());
    assert_eq!(run_all.status.code(), Some(2));

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/data/stage.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f == "corpus.csv"));
    assert!(dir.path().join("o/data/config.json").exists());
}

#[test]
fn out_dir_from_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_lsatc"))
        .current_dir(dir.path())
        .env("LSATC_OUT_DIR", "from-env")
        .env("RUST_LOG", "warn")
        .args(["gen-data", "--config", "c.json", "--seed", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from-env/data/stage.json").exists());
}

#[test]
fn grad_check_command_passes() {
    let dir = setup();
    let out = lsatc(dir.path(), &["grad-check", "--seed", "1", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["summary"]["passed"], true);
    assert!(s["summary"]["max_rel_error"].as_f64().unwrap() < 1e-4);
}
