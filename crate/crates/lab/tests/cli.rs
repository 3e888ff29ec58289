//! End-to-end CLI behavior: exit codes, flag and environment semantics,
//! and failure modes, exercising the built binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meanfield-lab"))
}

fn small_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "problem": {{"activation": "tanh", "target": {{"kind": "sine"}}}},
  "params": {{"lazy": {{"epsilon": 0.2, "d": 1}}}},
  "dynamics": {{"n_particles": 100, "n_steps": 10, "seeds": 1, "store_snapshots": true, "snapshot_every": 0}},
  "bridge": {{"n_paths": 500, "n_steps": 20, "gh_order": 32, "t_probes": [0.5, 0.9], "drift_export_t_nodes": 3, "drift_export_w_nodes": 11}},
  "corollary1": {{"n_sweep": [16, 32], "n_seeds": 10, "delta": 0.05}},
  "output_dir": {out:?},
  "master_seed": 3
}}"#,
        out = out_dir.to_str().unwrap()
    )
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    let path = dir.join("config.json");
    std::fs::write(&path, small_config(&out)).unwrap();
    path
}

#[test]
fn missing_config_flag_exits_2() {
    let status = bin().arg("solve").status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"problem": {"activation": "relu"}}"#).unwrap();
    let status = bin().args(["solve", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"problem": {"activation": "tanh", "target": {"kind": "sine"}},
            "params": {"beta": 0.2, "tau": 0.04}, "surprise": 1}"#,
    )
    .unwrap();
    let status = bin().args(["solve", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bridge_without_solve_artifacts_instructs_user() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = bin().args(["bridge", "--config"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("solve"), "stderr should point at the solve subcommand: {stderr}");
}

#[test]
fn solve_bridge_dynamics_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for cmd in ["solve", "bridge", "dynamics", "corollary1"] {
        let status = bin().args([cmd, "--config"]).arg(&config).status().unwrap();
        assert_eq!(status.code(), Some(0), "{cmd} failed");
    }
    let out = dir.path().join("out");
    assert!(out.join("solve/mu_star.csv").exists());
    assert!(out.join("solve/static_bounds_report.json").exists());
    assert!(out.join("bridge/drift_field.csv").exists());
    assert!(out.join("bridge/energy_report.json").exists());
    assert!(out.join("dynamics/gaps_summary.csv").exists());
    assert!(out.join("corollary1/corollary1.csv").exists());
    // every artifact directory carries resolved config + provenance
    for cmd in ["solve", "bridge", "dynamics", "corollary1"] {
        assert!(out.join(cmd).join("resolved_config.json").exists());
        assert!(out.join(cmd).join("provenance.json").exists());
    }
}

#[test]
fn verify_only_filter_selects_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let status = bin()
        .args(["verify", "--config"])
        .arg(&config)
        .args(["--only", "problem.f_tilde,problem.k_kernel"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report =
        std::fs::read_to_string(dir.path().join("out/verify/verify_report.jsonl")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2, "expected exactly the two selected checks: {report}");
    assert!(lines.iter().all(|l| l.contains("\"pass\":true")));
}

#[test]
fn corrupted_solution_fails_verification_with_named_check() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert_eq!(bin().args(["solve", "--config"]).arg(&config).status().unwrap().code(), Some(0));
    // clobber the stored density
    let mu = dir.path().join("out/solve/mu_star.csv");
    std::fs::write(&mu, "node,density\nnot,a number\n").unwrap();
    let out = bin()
        .args(["verify", "--config"])
        .arg(&config)
        .args(["--only", "stored_solution"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "corrupted artifact must fail verification");
    let report =
        std::fs::read_to_string(dir.path().join("out/verify/verify_report.jsonl")).unwrap();
    assert!(report.contains("stored_solution.residual"));
    assert!(report.contains("\"pass\":false"));
}

#[test]
fn solver_non_convergence_exits_3_with_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        format!(
            r#"{{
  "problem": {{"activation": "tanh", "target": {{"kind": "sine"}}}},
  "params": {{"beta": 0.2, "tau": 0.04}},
  "solver": {{"tol": 1e-10, "max_iter": 2, "damping": 1.0}},
  "output_dir": {out:?},
  "master_seed": 3
}}"#,
            out = out.to_str().unwrap()
        ),
    )
    .unwrap();
    let status = bin().args(["solve", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(3));
    assert!(out.join("solve/continuation_trace.csv").exists());
    assert!(out.join("solve/failure.json").exists());
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let flag_out = dir.path().join("flag_out");
    let env_out = dir.path().join("env_out");
    let status = bin()
        .args(["solve", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&flag_out)
        .env("MEANFIELD_LAB_OUT", &env_out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(env_out.join("solve/mu_star.csv").exists(), "env override must win");
    assert!(!flag_out.exists(), "flag directory must not be written");
}

#[test]
fn seed_flag_changes_stochastic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = |seed: &str, out: &Path| {
        let status = bin()
            .args(["dynamics", "--config"])
            .arg(&config)
            .args(["--seed", seed])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        std::fs::read(out.join("dynamics/gaps_summary.csv")).unwrap()
    };
    let a = run("11", &dir.path().join("a"));
    let b = run("12", &dir.path().join("b"));
    let a2 = run("11", &dir.path().join("a2"));
    assert_ne!(a, b, "different seeds must change the trajectories");
    assert_eq!(a, a2, "same seed must reproduce bytes");
}
