use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regaze"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn regaze")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn unknown_config_field_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--set", "no_such_field=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--policy", "checkpoint", "--set", "checkpoint=/nonexistent/final.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn expert_eval_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--policy", "expert", "--set", "n_chains=3", "--deterministic"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = json(&dir.path().join("run.json"));
    assert_eq!(run["command"], "eval");
    assert_eq!(run["status"], "ok");
    assert_eq!(run["config"]["n_chains"], 3);
    let cfg = json(&dir.path().join("config.json"));
    assert_eq!(cfg, run["config"]);
}

#[test]
fn config_file_then_set_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"n_chains": 4, "env": "B"}"#).unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_regaze"))
        .args(["eval", "--policy", "zero", "--config"])
        .arg(&cfg)
        .args(["--set", "n_chains=2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let c = json(&out.join("config.json"));
    assert_eq!(c["n_chains"], 2);
    assert_eq!(c["env"], "B");
}
