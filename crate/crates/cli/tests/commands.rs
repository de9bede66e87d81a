use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cams(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cams"))
        .args(args)
        .env_remove("CAMS_CACHE_DIR")
        .output()
        .expect("spawn cams")
}

fn synth(dir: &Path, seed: &str) {
    let out = cams(&["synth", "--seed", seed, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn edit_json(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn missing_embedding_is_a_validation_error_naming_the_text() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "2");
    edit_json(&tmp.path().join("dataset.json"), |v| {
        v["answers"][0]["text"] = "a text nobody embedded".into();
    });
    let run = tmp.path().join("run.json");
    let out = cams(&["--config", run.to_str().unwrap(), "embed"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a text nobody embedded"));
}

#[test]
fn unreachable_llm_with_cold_cache_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "3");
    let run = tmp.path().join("run.json");
    edit_json(&run, |v| {
        v["llm"] = serde_json::json!({"model": "m", "temperatures": [0.0], "cache_dir": "cache"});
    });
    let mock = tmp.path().join("down.json");
    fs::write(&mock, r#"{"fail": true}"#).unwrap();
    let out = cams(&["--config", run.to_str().unwrap(), "--mock", mock.to_str().unwrap(), "llm-run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "4");
    let run = tmp.path().join("run.json");

    edit_json(&run, |v| v["sweep"]["la_counts"] = serde_json::json!([]));
    let out = cams(&["--config", run.to_str().unwrap(), "sweep"]);
    assert_eq!(out.status.code(), Some(2));

    edit_json(&run, |v| v["unexpected"] = true.into());
    let out = cams(&["--config", run.to_str().unwrap(), "ingest"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(cams(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn aggregating_without_truth_fails_at_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "5");
    edit_json(&tmp.path().join("dataset.json"), |v| {
        v["instances"][0]["truth"] = Value::Null;
    });
    let run = tmp.path().join("run.json");
    let cfg = run.to_str().unwrap();
    assert!(cams(&["--config", cfg, "aggregate"]).status.success());
    assert!(tmp.path().join("results/cells/CC__SMV.json").exists());
    let out = cams(&["--config", cfg, "evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("q00000"));
}

#[test]
fn single_cell_config_writes_one_cell() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "6");
    let run = tmp.path().join("run.json");
    edit_json(&run, |v| {
        v["selections"] = serde_json::json!(["CC"]);
        v["aggregators"] = serde_json::json!(["RASA"]);
    });
    let out = cams(&["--config", run.to_str().unwrap(), "report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cells: Vec<_> = fs::read_dir(tmp.path().join("results/cells")).unwrap().collect();
    assert_eq!(cells.len(), 1);
    let agg = fs::read_to_string(tmp.path().join("results/aggregation_GLEU.tsv")).unwrap();
    assert_eq!(agg.lines().count(), 2);
}

#[test]
fn sweep_writes_one_report_per_count() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "7");
    let run = tmp.path().join("run.json");
    let out = cams(&["--config", run.to_str().unwrap(), "sweep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in [1, 3, 5] {
        assert!(tmp.path().join(format!("results/sweep/la_{k}/report.md")).exists());
    }
    let long = fs::read_to_string(tmp.path().join("results/sweep/sweep_long.tsv")).unwrap();
    assert!(long.starts_with("la_count\tselection\tgroup\taggregator\tmetric\tscore\n"));
}

#[test]
fn manifest_rerun_rejects_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "8");
    let run = tmp.path().join("run.json");
    assert!(cams(&["--config", run.to_str().unwrap(), "ingest"]).status.success());
    let manifest = tmp.path().join("results/manifest.json");
    assert!(cams(&["rerun", manifest.to_str().unwrap()]).status.success());
    edit_json(&tmp.path().join("dataset.json"), |v| {
        v["instances"][0]["source"] = "changed".into();
    });
    assert_eq!(cams(&["rerun", manifest.to_str().unwrap()]).status.code(), Some(2));
}
