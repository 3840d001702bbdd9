//! End-to-end tests of the `sbeedlab` binary: exit codes, overwrite guard,
//! determinism and config handling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbeedlab::mdp::FiniteMdp;
use serde_json::{json, Value};

fn sbeedlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbeedlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path
}

fn small_config() -> Value {
    json!({
        "mdp": { "random": { "n_states": 3, "n_actions": 2, "discount": 0.8 } },
        "lambda": 0.3,
        "class_spec": {
            "n_values": 4, "n_policies": 4, "n_helpers": 2,
            "value_scale": 0.5, "logit_scale": 0.5, "helper_scale": 0.3,
            "scale_decay": 1.0, "realizable": true, "helper_complete": true
        },
        "n_grid": [64, 128, 256],
        "repetitions": 3,
        "seed": 5,
        "output_dir": "out",
        "lambda_grid": [0.001, 0.1, 1.0]
    })
}

#[test]
fn every_subcommand_succeeds_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_config());
    for (cmd, file) in [
        ("solve", "solve.json"),
        ("sbeed", "sbeed.json"),
        ("msbo", "msbo.json"),
        ("verify", "verify.json"),
        ("rate", "runs.csv"),
        ("lambda-sweep", "sweep.csv"),
    ] {
        let out_dir = format!("out-{cmd}");
        let out = sbeedlab(&[cmd, "--config", "c.json", "--out", &out_dir], dir.path());
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let out_dir = dir.path().join(&out_dir);
        assert!(out_dir.join(file).is_file(), "{cmd} wrote no {file}");
        let echo: Value =
            serde_json::from_slice(&fs::read(out_dir.join("config.echo.json")).unwrap()).unwrap();
        assert_eq!(echo["seed"], 5);
    }
}

#[test]
fn verify_prints_a_pass_table() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_config());
    let out = sbeedlab(&["verify", "--config", "c.json"], dir.path());
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    for name in ["temporal_consistency", "telescoping", "conditional_variance", "suboptimality", "quadratic_inequality"] {
        let line = table.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("no {name} row"));
        assert!(line.ends_with("PASS"), "{line}");
    }
}

#[test]
fn overwrite_guard_and_force() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_config());
    assert_eq!(code(&sbeedlab(&["rate", "--config", "c.json"], dir.path())), 0);
    let csv = dir.path().join("out/runs.csv");
    fs::write(&csv, "sentinel").unwrap();

    let refused = sbeedlab(&["rate", "--config", "c.json"], dir.path());
    assert_eq!(code(&refused), 2);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert_eq!(fs::read_to_string(&csv).unwrap(), "sentinel");

    assert_eq!(code(&sbeedlab(&["rate", "--config", "c.json", "--force"], dir.path())), 0);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("n,rep,seed,suboptimality,residual_norm,objective,c2,rhs_total,wall_ms\n"));
}

#[test]
fn reruns_are_byte_identical_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_config());
    for out in ["a", "b"] {
        assert_eq!(code(&sbeedlab(&["rate", "--config", "c.json", "--out", out], dir.path())), 0);
    }
    assert_eq!(code(&sbeedlab(&["rate", "--config", "c.json", "--out", "c", "--seed", "6"], dir.path())), 0);
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["runs.csv", "summary.json"] {
        assert_eq!(read("a", f), read("b", f), "{f} differs between reruns");
    }
    // The echo records the effective config, so only output_dir differs.
    let echo = |d: &str| {
        let mut v: Value = serde_json::from_slice(&read(d, "config.echo.json")).unwrap();
        assert_eq!(v["output_dir"], d);
        v.as_object_mut().unwrap().remove("output_dir");
        v
    };
    assert_eq!(echo("a"), echo("b"));
    assert_ne!(read("a", "runs.csv"), read("c", "runs.csv"));
    let summary: Value = serde_json::from_slice(&read("a", "summary.json")).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["kind"], "rate");
    assert_eq!(summary["passed"], true);
    let rows = String::from_utf8(read("a", "runs.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 3);
}

#[test]
fn failed_check_exits_with_one_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config["slope_range"] = json!([5.0, 6.0]);
    write_config(dir.path(), "c.json", &config);
    let out = sbeedlab(&["rate", "--config", "c.json"], dir.path());
    assert_eq!(code(&out), 1);
    let summary: Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], false);
    assert_eq!(summary["slope_in_range"], false);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "c.json", &small_config());

    assert_eq!(code(&sbeedlab(&[], p)), 2);
    assert_eq!(code(&sbeedlab(&["bogus"], p)), 2);
    assert_eq!(code(&sbeedlab(&["solve"], p)), 2);
    assert_eq!(code(&sbeedlab(&["solve", "--config", "missing.json"], p)), 2);
    assert_eq!(code(&sbeedlab(&["solve", "--config", "c.json", "--seed", "x"], p)), 2);

    let mut unknown = small_config();
    unknown["lamda"] = json!(0.1);
    write_config(p, "unknown.json", &unknown);
    assert_eq!(code(&sbeedlab(&["solve", "--config", "unknown.json"], p)), 2);

    let mut decreasing = small_config();
    decreasing["n_grid"] = json!([256, 128]);
    write_config(p, "grid.json", &decreasing);
    assert_eq!(code(&sbeedlab(&["rate", "--config", "grid.json"], p)), 2);

    let mut no_grid = small_config();
    no_grid.as_object_mut().unwrap().remove("lambda_grid");
    write_config(p, "nogrid.json", &no_grid);
    let out = sbeedlab(&["lambda-sweep", "--config", "nogrid.json"], p);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_grid"));

    let mut not_realizable = small_config();
    not_realizable["class_spec"]["realizable"] = json!(false);
    write_config(p, "nr.json", &not_realizable);
    assert_eq!(code(&sbeedlab(&["rate", "--config", "nr.json", "--out", "nr"], p)), 2);
    assert!(!p.join("nr").exists(), "no output on a rejected config");
}

#[test]
fn mdp_file_resolves_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("configs");
    fs::create_dir(&sub).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mdp = FiniteMdp::random(3, 2, 0.9, 1.0, &mut rng).unwrap();
    fs::write(sub.join("mdp.json"), mdp.to_json().unwrap()).unwrap();
    let mut config = small_config();
    config["mdp"] = json!({ "file": "mdp.json" });
    write_config(&sub, "c.json", &config);

    let out = sbeedlab(&["solve", "--config", "configs/c.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/solve.json").is_file());
}
