use std::path::{Path, PathBuf};
use std::process::Command;

use ddp_irl_cli::output::sha256_hex;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ddp-irl"));
    c.env_remove("DDP_IRL_OUT");
    c
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn run(verb: &str, cfg: &Path, out: &Path, extra: &[&str]) -> i32 {
    let o = bin()
        .args([verb, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap();
    o.status.code().unwrap()
}

fn last_field(csv: &str, column: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == column).unwrap();
    lines.last().unwrap().split(',').nth(i).unwrap().parse().unwrap()
}

#[test]
fn closed_loop_scalar_with_noise_recovers_theta() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"kind": "irl-closed", "benchmark": "scalar_example", "noise_sigma": [0.1]}"#);
    let out = tmp.path().join("out");
    assert_eq!(run("irl-closed", &cfg, &out, &["--seed", "7"]), 0);
    let trace = std::fs::read_to_string(out.join("trace_sigma0_seed7.csv")).unwrap();
    assert!(last_field(&trace, "param_residual") < 1e-6);
}

#[test]
fn grad_check_on_cartpole_is_within_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.json", r#"{"kind": "grad-check", "benchmark": "cartpole", "check": 1e-5}"#);
    let out = tmp.path().join("out");
    assert_eq!(run("grad-check", &cfg, &out, &[]), 0);
    let table = std::fs::read_to_string(out.join("gradients.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 9);
    for r in rows {
        let oracle: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert!(oracle < 1e-5, "{r}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for (name, json) in [
        ("unknown.json", r#"{"kind": "solve", "benchmark": "pendulum"}"#),
        ("malformed.json", r#"{"kind": "solve", "#),
        ("sigma.json", r#"{"kind": "irl-open", "benchmark": "scalar_example", "noise_sigma": [-0.1]}"#),
        ("extra.json", r#"{"kind": "solve", "benchmark": "scalar_example", "colour": 1}"#),
    ] {
        let cfg = write_config(tmp.path(), name, json);
        let verb = if name == "sigma.json" { "irl-open" } else { "solve" };
        assert_eq!(run(verb, &cfg, &out, &[]), 2, "{name}");
    }
    let cfg = write_config(tmp.path(), "kind.json", r#"{"kind": "solve", "benchmark": "scalar_example"}"#);
    assert_eq!(run("irl-closed", &cfg, &out, &[]), 2);
    assert_eq!(run("solve", &tmp.path().join("missing.json"), &out, &[]), 2);
}

#[test]
fn solver_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    // A negative position bound makes the zero-control start infeasible.
    let cfg = write_config(
        tmp.path(),
        "f.json",
        r#"{"kind": "solve", "benchmark": "cartpole", "theta": [1.0, 0.3, 0.8, 1.0, 0.5, 2.0, 0.3, -1.0, 3.5]}"#,
    );
    assert_eq!(run("solve", &cfg, &tmp.path().join("out"), &[]), 3);
}

#[test]
fn threshold_violation_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.json",
        r#"{"kind": "irl-open", "benchmark": "scalar_example", "t_max": 1, "eta": 1e-4, "check": 1e-12}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(run("irl-open", &cfg, &out, &[]), 4);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["violations"].as_array().unwrap().len(), 1);
}

#[test]
fn outputs_are_byte_identical_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "n.json",
        r#"{"kind": "noise-eval", "benchmark": "scalar_example", "seeds": [1, 2, 3, 4], "noise_sigma": [0.05, 0.1],
            "backtracking": true, "t_max": 30, "check": 1.0}"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run("noise-eval", &cfg, &a, &["--jobs", "1"]), 0);
    assert_eq!(run("noise-eval", &cfg, &b, &["--jobs", "4"]), 0);
    let ca = std::fs::read(a.join("noise_eval.csv")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("noise_eval.csv")).unwrap());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let files = m["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let bytes = std::fs::read(a.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
    assert_eq!(m["config"]["mu_demo"], 1e-6);
    assert_eq!(m["kind"], "noise-eval");
}

#[test]
fn ioc_recover_profile_and_recovery() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "i.json",
        r#"{"kind": "ioc-recover", "benchmark": "lqr_ioc", "lengths": [1, 2, 3, 4, 5, 6, 10], "check": 1e-4}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(run("ioc-recover", &cfg, &out, &[]), 0);
    let profile = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    for line in profile.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (length, rank): (usize, usize) = (f[1].parse().unwrap(), f[3].parse().unwrap());
        assert_eq!(rank, length.min(5), "{line}");
    }
    let unconstrained = write_config(tmp.path(), "u.json", r#"{"kind": "ioc-recover", "benchmark": "cartpole"}"#);
    assert_eq!(run("ioc-recover", &unconstrained, &out, &[]), 2);
}

#[test]
fn rank_sweep_reports_first_full_rank_length() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "r.json",
        r#"{"kind": "rank-sweep", "benchmark": "arm2link", "overrides": {"constrained": false},
            "solver": "unconstrained", "lengths": [1, 2, 3, 4], "noise_sigma": [0.05], "t_max": 100}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(run("rank-sweep", &cfg, &out, &[]), 0);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let n_theta = s["summary"][0]["n_theta"].as_u64().unwrap();
    let first = s["summary"][0]["first_full_rank"].as_u64().unwrap();
    // Two controls per stage.
    assert_eq!(first, n_theta.div_ceil(2));
}

#[test]
fn env_var_sets_the_default_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.json", r#"{"kind": "solve", "benchmark": "scalar_example"}"#);
    let root = tmp.path().join("root");
    let st = bin().args(["solve", "--config", cfg.to_str().unwrap()]).env("DDP_IRL_OUT", &root).status().unwrap();
    assert!(st.success());
    let traj = std::fs::read_to_string(root.join("solve-scalar_example/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().nth(1).unwrap(), "0,1.0000000000000000e0,-5.9999999999999998e-1");
}
