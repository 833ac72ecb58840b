use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DUALITY: &str = r#"
experiment = "verify-duality"

[mc]
replicas = 2000
seed = 3

[grid]
t = 1.0
m = 4
r = 2

[density]
kind = "bump"
box = [[-1.0, 1.0], [-1.0, 1.0]]

[params]
product_rule_paths = 20
"#;

fn shiftcalc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftcalc")).args(args).env_remove("SHIFTCALC_WORKERS").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn records(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Drops the two fields that depend on the clock.
fn stable(out: &Output) -> Vec<Value> {
    let mut rs = records(out);
    for r in &mut rs {
        let o = r.as_object_mut().unwrap();
        o.remove("timestamp");
        o.remove("wall_time_s");
    }
    rs
}

#[test]
fn list_has_ten_tagged_experiments() {
    let out = shiftcalc(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for l in &lines {
        let cols: Vec<_> = l.split('\t').collect();
        assert_eq!(cols.len(), 3, "{l}");
        assert!(cols[1].starts_with('[') && cols[1].ends_with(']'));
    }
}

#[test]
fn help_lists_experiments_and_exit_codes() {
    let out = shiftcalc(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for id in ["basis-algebra", "verify-pushforward", "mollify-study", "mn-bounds"] {
        assert!(text.contains(id), "{id} missing from help");
    }
    assert!(text.contains("Exit status"));
}

#[test]
fn passing_run_writes_checks_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DUALITY);
    let out = shiftcalc(&["run", &cfg, "--workers", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rs = records(&out);
    let summary = rs.last().unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["checks"].as_u64().unwrap() as usize, rs.len() - 1);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    assert!(rs[..rs.len() - 1].iter().all(|r| r["record"] == "check" && r["config_hash"] == summary["config_hash"]));
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DUALITY);
    let one = shiftcalc(&["run", &cfg, "--workers", "1"]);
    let three = shiftcalc(&["run", &cfg, "--workers", "3"]);
    let env = Command::new(env!("CARGO_BIN_EXE_shiftcalc")).args(["run", &cfg]).env("SHIFTCALC_WORKERS", "2").output().unwrap();
    assert_eq!(stable(&one), stable(&three));
    assert_eq!(stable(&one), stable(&env));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DUALITY);
    let a = stable(&shiftcalc(&["run", &cfg]));
    let b = stable(&shiftcalc(&["run", &cfg, "--seed", "99"]));
    assert_ne!(a.last().unwrap()["config_hash"], b.last().unwrap()["config_hash"]);
    assert_ne!(a[0]["detail"], b[0]["detail"]);
}

#[test]
fn json_config_matches_toml() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = write(dir.path(), "d.toml", DUALITY);
    let value: toml::Value = toml::from_str(DUALITY).unwrap();
    let json_path = write(dir.path(), "d.json", &serde_json::to_string(&value).unwrap());
    assert_eq!(stable(&shiftcalc(&["run", &toml_path])), stable(&shiftcalc(&["run", &json_path])));
}

#[test]
fn csv_tables_land_in_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DUALITY);
    let csv = dir.path().join("tables");
    let out = shiftcalc(&["run", &cfg, "--csv-out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let names: Vec<_> = std::fs::read_dir(&csv).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| n.to_string_lossy().ends_with(".csv")));
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (DUALITY.replace("kind = \"bump\"", "kind = \"cube\""), "density"),
        (DUALITY.replace("seed = 3", "seed = 3\nworkers = 4"), "mc"),
        (DUALITY.replace("replicas = 2000", "replicas = 10"), "mc.replicas"),
        (DUALITY.replace("product_rule_paths = 20", "product_rule_paths = \"many\""), "params.product_rule_paths"),
        (DUALITY.replace("verify-duality", "verify-nothing"), "experiment"),
        (format!("{DUALITY}\n[[models]]\nkind = \"teleport\"\n"), "models[0]"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("bad{i}.toml"), text);
        let out = shiftcalc(&["run", &cfg]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "case {i}: {err}");
        assert!(err.contains(field), "case {i}: `{field}` not in {err}");
    }
    let out = shiftcalc(&["run", "/no/such/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = "experiment = \"rstar\"\n[mc]\nreplicas = 1000\nseed = 7\n[density]\nkind = \"bump\"\nbox = [[-1.0, 1.0]]\n[params]\ntolerance = 1e-9\n";
    let cfg = write(dir.path(), "r.toml", text);
    let out = shiftcalc(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(records(&out).last().unwrap()["pass"], false);
}

#[test]
fn unwritable_csv_dir_is_a_runtime_fault() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DUALITY);
    let blocker = write(dir.path(), "file", "");
    let out = shiftcalc(&["run", &cfg, "--csv-out", &blocker]);
    assert_eq!(out.status.code(), Some(3));
}
