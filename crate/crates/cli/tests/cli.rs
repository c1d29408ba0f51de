use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jepkd"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).env_remove("JEPKD_SELFTEST_MUTATION").output().expect("spawn jepkd")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(smoke_config()).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

/// Generates the smoke corpus into `dir/data` and returns the config path.
fn prepared(dir: &Path) -> String {
    let cfg = smoke_config().to_string_lossy().into_owned();
    let out = run(dir, &["gen-data", "--config", &cfg, "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    cfg
}

#[test]
fn default_corpus_has_2400_samples_and_regenerates_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gen-data", "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("2400 samples"), "{}", stdout(&out));
    let manifest = tmp.path().join("data/manifest.json");
    let first = fs::read(&manifest).unwrap();
    let teacher = fs::read(tmp.path().join("data/test/test-00000.teacher.jpkd")).unwrap();
    let out = run(tmp.path(), &["gen-data", "--out", "data"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("Unchanged"));
    assert_eq!(fs::read(&manifest).unwrap(), first);
    assert_eq!(fs::read(tmp.path().join("data/test/test-00000.teacher.jpkd")).unwrap(), teacher);
}

#[test]
fn mismatched_corpus_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    let out = run(tmp.path(), &["gen-data", "--config", &cfg, "--out", "data", "--seed", "9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"), "{}", stderr(&out));
    let out = run(tmp.path(), &["gen-data", "--config", &cfg, "--out", "data", "--seed", "9", "--force"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("Replaced"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn split_training_equals_straight_through() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "whole", "--stages", "1,2,3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "split", "--stages", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "split", "--stages", "2,3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("resumed"));
    for file in ["metrics.jsonl", "checkpoint.jpkc", "stage1.jpkc", "stage2.jpkc", "stage3.jpkc"] {
        assert_eq!(
            fs::read(tmp.path().join("whole").join(file)).unwrap(),
            fs::read(tmp.path().join("split").join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    prepared(tmp.path());
    let cfg = write_config(tmp.path(), "long.json", |v| v["schedule"]["stage1_epochs"] = 40.into());
    let cfg = cfg.to_string_lossy().into_owned();
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "whole"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut child = bin()
        .current_dir(tmp.path())
        .args(["train", "--config", &cfg, "--out", "killed"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let metrics = tmp.path().join("killed/metrics.jsonl");
    let deadline = Instant::now() + Duration::from_secs(120);
    while Instant::now() < deadline {
        let lines = fs::read_to_string(&metrics).map(|t| t.lines().count()).unwrap_or(0);
        if lines >= 4 || child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    child.wait().unwrap();
    assert!(tmp.path().join("killed/checkpoint.jpkc").exists());

    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "killed"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["metrics.jsonl", "checkpoint.jpkc"] {
        assert_eq!(
            fs::read(tmp.path().join("whole").join(file)).unwrap(),
            fs::read(tmp.path().join("killed").join(file)).unwrap(),
            "{file} differs after resume"
        );
    }
}

#[test]
fn training_rejects_bad_stage_lists_and_missing_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config().to_string_lossy().into_owned();
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "run"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("manifest.json"));
    prepared(tmp.path());
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "run", "--stages", "3,1"]);
    assert_eq!(code(&out), 2);
    let out = run(tmp.path(), &["train", "--config", &cfg, "--out", "run", "--stages", "2"]);
    assert_eq!(code(&out), 2, "stage 2 without stage 1 must be rejected");
}

#[test]
fn eval_is_deterministic_and_modes_differ_only_in_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    assert_eq!(code(&run(tmp.path(), &["train", "--config", &cfg, "--out", "run"])), 0);
    let out = run(tmp.path(), &["eval", "--config", &cfg, "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out);
    let value: f64 = line.trim().strip_prefix("CER=").expect("CER= line").parse().unwrap();
    let report = tmp.path().join("run/eval-test-jepkd.json");
    let first = fs::read(&report).unwrap();
    assert_eq!(code(&run(tmp.path(), &["eval", "--config", &cfg, "--out", "run"])), 0);
    assert_eq!(fs::read(&report).unwrap(), first);

    let j: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(j["cer"].as_f64().unwrap(), value);
    assert_eq!(code(&run(tmp.path(), &["eval", "--config", &cfg, "--out", "run", "--mode", "baseline"])), 0);
    let b: Value = serde_json::from_slice(&fs::read(tmp.path().join("run/eval-test-baseline.json")).unwrap()).unwrap();
    assert_eq!(j["memory"], "generator");
    assert_eq!(b["memory"], "encoder");
    for field in ["split", "config_hash", "seed", "samples"] {
        assert_eq!(j[field], b[field], "{field}");
    }
    assert_ne!(j["l1_gap"], Value::Null);
}

#[test]
fn eval_errors_are_reported_with_usage_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    assert_eq!(code(&run(tmp.path(), &["train", "--config", &cfg, "--out", "run", "--stages", "1"])), 0);
    let out = run(tmp.path(), &["eval", "--config", &cfg, "--out", "run", "--split", "dev"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train, val, test"), "{}", stderr(&out));

    let other = write_config(tmp.path(), "other.json", |v| v["schedule"]["max_lr"] = 0.002.into());
    let out = run(tmp.path(), &["eval", "--config", other.to_str().unwrap(), "--out", "run"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("config hash mismatch") && err.contains("expected") && err.contains("found"), "{err}");
}

#[test]
fn compare_verdicts_and_schema_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    assert_eq!(code(&run(tmp.path(), &["train", "--config", &cfg, "--out", "run"])), 0);
    assert_eq!(code(&run(tmp.path(), &["eval", "--config", &cfg, "--out", "run"])), 0);
    let report = tmp.path().join("run/eval-test-jepkd.json");
    let path = report.to_str().unwrap();

    let out = run(tmp.path(), &["compare", path, path, "--out", "cmp"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("verdict: unchanged"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("cmp/compare.json")).unwrap()).unwrap();
    assert!(doc["rows"].as_array().unwrap().iter().all(|r| r["delta"] == 0.0));

    let mut better: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    better["cer"] = (better["cer"].as_f64().unwrap() - 0.08).into();
    let better_path = tmp.path().join("better.json");
    fs::write(&better_path, serde_json::to_string_pretty(&better).unwrap()).unwrap();
    let out = run(tmp.path(), &["compare", path, better_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("verdict: improved"));
    let out = run(tmp.path(), &["compare", better_path.to_str().unwrap(), path]);
    assert_eq!(code(&out), 1, "regression beyond tolerance must fail");
    assert!(stdout(&out).contains("regressed"));
    let out = run(tmp.path(), &["compare", better_path.to_str().unwrap(), path, "--tolerance", "0.1"]);
    assert_eq!(code(&out), 0, "regression within tolerance passes");

    let mut broken = better.clone();
    broken.as_object_mut().unwrap().remove("ctc_greedy_cer");
    let broken_path = tmp.path().join("broken.json");
    fs::write(&broken_path, serde_json::to_string(&broken).unwrap()).unwrap();
    let out = run(tmp.path(), &["compare", path, broken_path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("schema error") && stderr(&out).contains("ctc_greedy_cer"), "{}", stderr(&out));
}

#[test]
fn selftest_passes_and_catches_the_ctc_mutation() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = run(tmp.path(), &["selftest"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).matches("PASS").count(), 5);

    let out = bin().current_dir(tmp.path()).arg("selftest").env("JEPKD_SELFTEST_MUTATION", "ctc-no-skip").output().unwrap();
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL ctc-oracle"), "{}", stdout(&out));
}

#[test]
fn commands_only_write_inside_their_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    assert_eq!(code(&run(tmp.path(), &["train", "--config", &cfg, "--out", "run"])), 0);
    assert_eq!(code(&run(tmp.path(), &["eval", "--config", &cfg, "--out", "run"])), 0);
    let mut names: Vec<String> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["data", "run"]);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["train", "--mode", "student"])), 2);
    assert_eq!(code(&run(tmp.path(), &["frobnicate"])), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    let out = run(tmp.path(), &["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("colour"));
}
