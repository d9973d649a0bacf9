use std::path::Path;
use std::process::{Command, Output};

fn neurotune(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurotune")).args(args).current_dir(dir).env_remove("NEUROTUNE_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, subjects: &str) {
    let o = neurotune(&["synth", "--out", "data", "--subjects", subjects, "--trials", "6"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, name: &str, extra: serde_json::Value) {
    let mut v = serde_json::json!({
        "model": "labram_tiny", "data": "data", "seed": 3, "output_dir": format!("out_{name}"),
        "harness": { "folds": 2, "train": { "epochs": 1 }, "ablation": { "ranks": [1, 2] } }
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    std::fs::write(dir.join(format!("{name}.json")), v.to_string()).unwrap();
}

#[test]
fn count_params_reports_heads_and_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let o = neurotune(&["count-params", "--model", "labram_desk", "--freeze", "backbone", "--json", "c.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(rep["trainable"], 402);
    assert_eq!(rep["total"], 1_952_778);
    assert!(stdout(&o).contains("trainable"));

    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/models/labram_desk.json")).unwrap();
    cfg["arch"]["depth"] = 1.into();
    std::fs::write(dir.path().join("depth1.json"), cfg.to_string()).unwrap();
    let o = neurotune(&["count-params", "--model", "depth1.json", "--lora", r#"{"targets":["attention"],"rank":1}"#], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(json["trainable"], 1_202);
    assert_eq!(json["adapter"], 800);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    std::fs::remove_file(dir.path().join("data/data.bin")).unwrap();
    let o = neurotune(&["preprocess", "--in", "data", "--style", "labram", "--out", "pre"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.bin"), "{}", stderr(&o));

    let o = neurotune(&["count-params", "--model", "no_such_model"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = neurotune(&["count-params", "--model", "eegnet", "--lora", r#"{"targets":["attention"],"rank":1}"#], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = neurotune(&["preprocess", "--in", "data", "--style", "mne", "--out", "pre"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn misspelled_config_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    std::fs::write(dir.path().join("bad.json"), r#"{"model":"labram_tiny","data":"data","output_dir":"o","harness":{"train":{"epoch":3}}}"#).unwrap();
    let o = neurotune(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("harness.train") && err.contains("epoch"), "{err}");
}

#[test]
fn preprocess_writes_a_mapping_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    let o = neurotune(&["preprocess", "--in", "data", "--style", "neurogpt", "--out", "pre", "--threshold-mm", "10"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("pre/mapping.json")).unwrap()).unwrap();
    assert_eq!(report["mapping"]["entries"].as_array().unwrap().len(), 22);
    assert_eq!(report["pipeline"]["threshold_mm"], 10.0);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("pre/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["fs"], 250.0);
    assert_eq!(meta["channels"].as_array().unwrap().len(), 22);
}

#[test]
fn train_then_report_merges_run_sets() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4");
    write_config(dir.path(), "full", serde_json::json!({"variant": "full"}));
    write_config(dir.path(), "lora", serde_json::json!({"variant": "lora", "lora": {"targets": ["attention", "fc"], "rank": 2}}));
    for c in ["full", "lora"] {
        let o = neurotune(&["train", "--config", &format!("{c}.json")], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(dir.path().join(format!("out_{c}/folds.json")).exists());
    }
    let o = neurotune(&["report", "--runs", "out_lora", "out_full", "--out", "rep"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("rep/accuracy.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let ttest = std::fs::read_to_string(dir.path().join("rep/ttest.csv")).unwrap();
    assert_eq!(ttest.lines().count(), 2);
    // Input order does not matter.
    let o = neurotune(&["report", "--runs", "out_full", "out_lora", "--out", "rep2"], dir.path());
    assert!(o.status.success());
    assert_eq!(table, std::fs::read_to_string(dir.path().join("rep2/accuracy.csv")).unwrap());
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_neurotune"));
        c.args(["synth", "--out", out, "--subjects", "1", "--trials", "2"]).current_dir(dir.path()).env_remove("NEUROTUNE_SEED");
        if let Some(s) = env {
            c.env("NEUROTUNE_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(dir.path().join(out).join("data.bin")).unwrap()
    };
    let a = run("a", None);
    assert_eq!(a, run("b", Some("0")));
    assert_ne!(a, run("c", Some("17")));
    let o = Command::new(env!("CARGO_BIN_EXE_neurotune")).args(["synth", "--out", "d"]).current_dir(dir.path()).env("NEUROTUNE_SEED", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_resumes_from_cached_runs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4");
    write_config(dir.path(), "abl", serde_json::json!({}));
    let o = neurotune(&["ablate", "--config", "abl.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(dir.path().join("out_abl/rank_sweep.csv")).unwrap();
    let cached = std::fs::read_dir(dir.path().join("out_abl/runs")).unwrap().count();
    // 2 sweep + 6 combos + 2 dropout grid points over 2 folds.
    assert_eq!(cached, 20);
    let o = neurotune(&["ablate", "--config", "abl.json"], dir.path());
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(dir.path().join("out_abl/rank_sweep.csv")).unwrap());
    assert_eq!(std::fs::read_dir(dir.path().join("out_abl/runs")).unwrap().count(), cached);
}
