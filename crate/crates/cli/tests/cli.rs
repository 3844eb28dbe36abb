use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use riskgrid::config::RunConfig;
use serde_json::Value;

fn riskgrid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskgrid"))
        .current_dir(dir)
        .env_remove("RISKGRID_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Desk preset shortened to a few episodes, written to `name`.
fn short_config(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) {
    let mut cfg: Value = serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
    cfg["training"]["episodes"] = 3.into();
    edit(&mut cfg);
    fs::write(dir.join(name), cfg.to_string()).unwrap();
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&riskgrid(dir.path(), &["train", "--variant", "qmix"])), 2);
    assert_eq!(code(&riskgrid(dir.path(), &["train", "--alpha", "1.5"])), 2);
    assert_eq!(code(&riskgrid(dir.path(), &["train", "--config", "missing.json"])), 2);
    fs::write(dir.path().join("bad.json"), "{\"system\": 1}").unwrap();
    assert_eq!(code(&riskgrid(dir.path(), &["eval", "--config", "bad.json"])), 2);
    fs::write(dir.path().join("table.json"), "{\"n\": 2, \"values\": {\"0\": 1.0}}").unwrap();
    assert_eq!(code(&riskgrid(dir.path(), &["shapley", "--table", "table.json"])), 2);
}

#[test]
fn generated_profiles_without_noise_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskgrid(dir.path(), &["scen", "gen", "--count", "4", "--noise", "0"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| *l == lines[0]));
}

#[test]
fn reduced_scenarios_form_distributions() {
    let dir = tempfile::tempdir().unwrap();
    for (source, file) in [("solar", "pv.csv"), ("evening-peak", "load.csv")] {
        let out = riskgrid(dir.path(), &["scen", "gen", "--count", "1000", "--source", source, "--out", file]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = riskgrid(
        dir.path(),
        &["scen", "reduce", "--pv", "pv.csv", "--load", "load.csv", "--k", "20", "--k-load", "10", "--out", "s.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let set: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    for (key, k) in [("pv_probs", 20), ("load_probs", 10)] {
        let probs: Vec<f64> = serde_json::from_value(set[key].clone()).unwrap();
        assert_eq!(probs.len(), k);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let out = riskgrid(dir.path(), &["export", "s.json"]);
    assert_eq!(code(&out), 0);
    assert!(!out.stdout.is_empty());
}

#[test]
fn train_and_eval_are_reproducible_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_config(d, "short.json", |_| {});
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        for cmd in ["train", "eval"] {
            let out = riskgrid(d, &[cmd, "--config", "short.json", "--out", run]);
            assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        }
        let read = |f: &str| fs::read(d.join(run).join(f)).unwrap();
        artifacts.push((read("metrics.csv"), read("eval.json"), read("dispatch.csv")));
    }
    assert!(artifacts[0] == artifacts[1]);

    let out = riskgrid(d, &["export", "a/eval.json", "--out", "a/export.csv"]);
    assert_eq!(code(&out), 0);
    assert!(fs::read_to_string(d.join("a/export.csv")).unwrap().starts_with("# config_hash:"));

    // a checkpoint from another configuration is refused
    let out = riskgrid(d, &["eval", "--config", "short.json", "--out", "a", "--variant", "mappo"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let threads = Command::new(env!("CARGO_BIN_EXE_riskgrid"))
        .current_dir(d)
        .env("RISKGRID_THREADS", "zero")
        .args(["eval", "--config", "short.json", "--out", "a"])
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_riskgrid"))
        .current_dir(d)
        .env("RISKGRID_THREADS", "2")
        .args(["eval", "--config", "short.json", "--out", "a"])
        .output()
        .unwrap();
    assert_eq!(code(&threads), 0);
    assert_eq!(fs::read(d.join("a/eval.json")).unwrap(), artifacts[0].1);
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    short_config(dir.path(), "nan.json", |cfg| {
        cfg["training"]["actor_lr"] = 1e300.into();
        cfg["training"]["critic_lr"] = 1e300.into();
        cfg["training"]["ppo"]["max_grad_norm"] = 1e300.into();
    });
    let out = riskgrid(dir.path(), &["train", "--config", "nan.json", "--out", "n"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shapley_from_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = r#"{"n": 3, "values": {"0": 1, "1": 2, "2": 3, "0,1": 4, "0,2": 5, "1,2": 6, "0,1,2": 7}}"#;
    fs::write(dir.path().join("t.json"), table).unwrap();
    let out = riskgrid(dir.path(), &["shapley", "--table", "t.json", "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("MG 0: 1.3333") && stdout.contains("MG 2: 3.3333"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/shapley.json")).unwrap()).unwrap();
    let shares: Vec<f64> = serde_json::from_value(doc["allocation"]["shares"].clone()).unwrap();
    assert!((shares.iter().sum::<f64>() - 7.0).abs() < 1e-12);
    let out = riskgrid(dir.path(), &["export", "s/shapley.json"]);
    assert_eq!(code(&out), 0);
}
