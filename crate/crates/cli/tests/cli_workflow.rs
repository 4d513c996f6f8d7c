//! End-to-end behaviour of the binary: subcommand chaining through the
//! persisted contract artifact, exit codes, and config error reporting.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config() -> String {
    r#"
[model]
state_dim = 1
noise_dim = 1
horizon = 1.0
n_steps = 25
n_cells = 8
x0 = [0.0]
sigma = { kind = "constant", value = 1.0 }
lambda = { kind = "action" }
cost = { kind = "quadratic", coef = 0.5 }
discount = { kind = "constant", rate = 0.0 }
utility = { kind = "identity" }
actions = { min = -2.0, max = 2.0, n = 41 }

[policy]
z = { kind = "constant", values = [1.0] }
y0 = 0.0

[verify]
battery_center = [0.5, 0.3]
battery_scale = 1.5
n_steps_override = 50
power_checks = false

[run]
n_paths = 1500
seed = 77

[output]
dir = "unused"
"#
    .to_string()
}

fn pasim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pasim"))
        .args(args)
        .output()
        .expect("binary starts")
}

#[test]
fn subcommands_chain_through_the_contract_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("artifacts");
    let cfg = config.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    // agent-value before generate-contract: dependency error naming the file
    let missing = pasim(&["agent-value", "--config", cfg, "--out", out_s]);
    assert_eq!(missing.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(
        stderr.contains("contract.json"),
        "expected the missing artifact to be named, got: {stderr}"
    );

    let generate = pasim(&["generate-contract", "--config", cfg, "--out", out_s]);
    assert_eq!(
        generate.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&generate.stderr)
    );
    assert!(out.join("contract.json").exists());
    assert!(out.join("contract_summary.csv").exists());

    for sub in ["agent-value", "verify-weakform", "diagnostics"] {
        let run = pasim(&[sub, "--config", cfg, "--out", out_s]);
        assert_eq!(
            run.status.code(),
            Some(0),
            "{sub} failed:\n{}",
            String::from_utf8_lossy(&run.stderr)
        );
    }
    assert!(out.join("residuals.csv").exists());
    assert!(out.join("tightness.csv").exists());
    assert!(out.join("report.json").exists());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    // unknown key
    let bad = small_config().replace("[run]", "[run]\nmystery_knob = 3\n");
    let config = write_config(tmp.path(), &bad);
    let run = pasim(&["simulate", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("mystery_knob"), "{stderr}");

    // invalid value, named key
    let bad = small_config().replace("n_cells = 8", "n_cells = 0");
    let config = write_config(tmp.path(), &bad);
    let run = pasim(&["simulate", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("n_cells"), "{stderr}");

    // missing config flag entirely
    let run = pasim(&["simulate"]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn solve_bsde_requires_its_block_and_reports_z() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("bsde");
    let run = pasim(&[
        "solve-bsde",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(3), "missing [bsde] block is a runtime error");

    let with_block = small_config().replace(
        "[run]",
        "[bsde]\nterminal = { kind = \"terminal_state\" }\ndriver = { kind = \"zero\" }\n\n[run]",
    );
    let config = write_config(tmp.path(), &with_block);
    let run = pasim(&[
        "solve-bsde",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    // the sensitivity table exists and its overall mean is near one
    let table = std::fs::read_to_string(out.join("bsde_z.csv")).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for line in table.lines().skip(1) {
        let mean_z: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        sum += mean_z;
        count += 1;
    }
    let overall = sum / count as f64;
    assert!((overall - 1.0).abs() <= 0.1, "mean sensitivity {overall}");
}

#[test]
fn json_table_format_is_supported() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("json_out");
    let run = pasim(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let table = std::fs::read_to_string(out.join("paths_summary.json")).unwrap();
    let rows: serde_json::Value = serde_json::from_str(&table).unwrap();
    assert!(rows.as_array().unwrap().len() == 1500);
}

#[test]
fn curved_model_families_run_end_to_end() {
    // bounded state-dependent volatility, exponential utility, affine policy
    let body = r#"
[model]
state_dim = 1
noise_dim = 1
horizon = 1.0
n_steps = 25
n_cells = 8
x0 = [0.1]
sigma = { kind = "bounded_affine", base = 1.0, slope = 0.3 }
lambda = { kind = "state_scaled", scale = 0.5, clamp = 3.0 }
cost = { kind = "quadratic", coef = 0.5 }
discount = { kind = "constant", rate = 0.2 }
utility = { kind = "cara", alpha = 0.4 }
actions = { min = -1.0, max = 1.0, n = 21 }

[principal]
range_tolerance = 0.05

[policy]
z = { kind = "affine", a = 0.2, b = 0.1, c = 0.0 }
y0 = 0.0
l = { kind = "independent", amplitude = 0.2 }

[verify]
battery_center = [0.1, 0.0]
battery_scale = 1.2
power_checks = false

[run]
n_paths = 1000
seed = 99

[output]
dir = "unused"
"#;
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), body);
    let out = tmp.path().join("curved");
    for sub in ["simulate", "generate-contract", "verify-weakform", "diagnostics"] {
        let run = pasim(&[
            sub,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            run.status.code(),
            Some(0),
            "{sub} failed:\n{}",
            String::from_utf8_lossy(&run.stderr)
        );
    }
}

#[test]
fn seed_override_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let cfg = config.to_str().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let out_c = tmp.path().join("c");
    assert!(pasim(&["simulate", "--config", cfg, "--out", out_a.to_str().unwrap()])
        .status
        .success());
    assert!(pasim(&["simulate", "--config", cfg, "--out", out_b.to_str().unwrap()])
        .status
        .success());
    assert!(pasim(&[
        "simulate",
        "--config",
        cfg,
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "1234",
    ])
    .status
    .success());
    let a = std::fs::read(out_a.join("paths_summary.csv")).unwrap();
    let b = std::fs::read(out_b.join("paths_summary.csv")).unwrap();
    let c = std::fs::read(out_c.join("paths_summary.csv")).unwrap();
    assert_eq!(a, b, "same seed must reproduce the table");
    assert_ne!(a, c, "the seed override must change the draws");
}
