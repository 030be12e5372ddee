use std::path::Path;
use std::process::{Command, Output};

fn jumpest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jumpest")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("c.json");
    std::fs::write(
        &p,
        r#"{"model": {"name": "quadratic_ef_model", "theta0": [1.0, 0.5]},
            "ef": {"name": "quadratic"},
            "sim": {"n": 3000, "delta": 0.02, "substeps": 4, "seed": 12}}"#,
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_writes_n_plus_one_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("path.csv");
    let jumps = dir.path().join("jumps.csv");
    let o = jumpest(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--jumps", jumps.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,t,x"));
    assert_eq!(lines.count(), 3001);
    assert!(std::fs::read_to_string(&jumps).unwrap().starts_with("time,x_pre,z,jump"));
}

#[test]
fn estimate_recovers_parameters_from_simulated_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("path.csv");
    assert!(jumpest(&["simulate", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let o = jumpest(&["estimate", "--config", &cfg, "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["diagnostics"]["converged"], true);
    for (j, truth) in [1.0, 0.5].iter().enumerate() {
        let hat = v["theta_hat"][j].as_f64().unwrap();
        let se = v["std_errors"][j].as_f64().unwrap();
        assert!((hat - truth).abs() < 5.0 * se, "coordinate {j}: {hat} ± {se}");
    }
}

#[test]
fn non_numeric_cell_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "i,t,x\n0,0,0.1\n1,0.02,0.2\n2,0.04,oops\n3,0.06,0.1\n").unwrap();
    let o = jumpest(&["estimate", "--model", "quadratic_ef_model", "--ef", "quadratic", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("row 4"), "{msg}");
}

#[test]
fn usage_and_config_errors_exit_two() {
    let o = jumpest(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"name": "quadratic_ef_model"}, "unknown_key": 3}"#).unwrap();
    let o = jumpest(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("unknown_key"));
}

#[test]
fn fisher_reports_diffusion_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("f.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"name": "ou_additive_jumps", "theta0": [1.0, 0.0, 0.5]},
            "ergodic": {"horizon": 200.0, "delta": 0.05, "substeps": 4, "burn_in": 5.0}}"#,
    )
    .unwrap();
    let o = jumpest(&["fisher", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let i2 = v["fisher"]["i2"][0][0].as_f64().unwrap();
    assert!((i2 - 8.0).abs() < 1e-6, "{i2}");
}
