use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rdslab_cli::manifest::sha256_hex;
use serde_json::Value;

fn rdslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdslab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_in(command: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    rdslab(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const AB: &str = r#"{ "schema": "rdslab-config/1", "system": "ab", "seed": 3,
  "certify": { "x_grid": 8, "v_grid": 16, "words": "exact" },
  "orbit": { "x": [0.0, 0.0], "depth": 6 } }"#;

#[test]
fn certify_writes_csv_and_checksummed_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), AB);
    let out = tmp.path().join("uef");
    let o = run_in("certify-uef", &config, &out, &["--N", "1"]);
    // One step is not enough: the certificate is negative.
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_NEGATIVE), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("certify_uef.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "certify-uef");
    assert_eq!(manifest["seed"], 3);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|f| f["path"] == "certify_uef.csv"));
    for f in outputs {
        let bytes = std::fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!((summary["result"]["bound"].as_f64().unwrap() + 2f64.ln() / 2.0).abs() < 1e-12);
    assert_eq!(summary["config"]["certify"]["n"], 1);

    let o = run_in("certify-uef", &config, &tmp.path().join("uef4"), &["--N", "4"]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_OK), "{}", stderr(&o));
}

#[test]
fn missing_required_field_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), r#"{ "schema": "rdslab-config/1", "seed": 1 }"#);
    let o = run_in("orbit", &config, &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG));
    assert!(stderr(&o).contains("system"), "{}", stderr(&o));
}

#[test]
fn nested_field_errors_carry_their_path() {
    let tmp = tempfile::tempdir().unwrap();
    let config =
        write_config(tmp.path(), r#"{ "schema": "rdslab-config/1", "system": "ab", "orbit": { "depth": "deep" } }"#);
    let o = run_in("orbit", &config, &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG));
    assert!(stderr(&o).contains("orbit.depth"), "{}", stderr(&o));

    let config =
        write_config(tmp.path(), r#"{ "schema": "rdslab-config/1", "system": "ab", "orbit": { "dpeth": 3 } }"#);
    let o = run_in("orbit", &config, &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG));
    assert!(stderr(&o).contains("dpeth"), "{}", stderr(&o));
}

#[test]
fn malformed_json_reports_position() {
    let tmp = tempfile::tempdir().unwrap();
    let config =
        write_config(tmp.path(), "{\n  \"schema\": \"rdslab-config/1\",\n  \"system\": \"ab\"\n  \"seed\": 1\n}");
    let o = run_in("tails", &config, &tmp.path().join("t"), &[]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn unknown_command_and_bad_flags_are_config_errors() {
    assert_eq!(rdslab(&["frobnicate"]).status.code(), Some(rdslab_cli::EXIT_CONFIG));
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), AB);
    let o = run_in("seminorm", &config, &tmp.path().join("t"), &["--N", "3"]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG), "{}", stderr(&o));
    let o = run_in("orbit", &config, &tmp.path().join("t"), &["--set", "orbit.depth"]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG), "{}", stderr(&o));
}

#[test]
fn identical_runs_give_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{ "schema": "rdslab-config/1", "system": "ab", "seed": 9,
             "moments": { "n_max": 10, "samples": 300 } }"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run_in("moments", &config, &a, &[]).status.code(), Some(0));
    assert_eq!(run_in("moments", &config, &b, &[]).status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("moments.csv")).unwrap(), std::fs::read(b.join("moments.csv")).unwrap());
    // Another seed changes the sample.
    let c = tmp.path().join("c");
    assert_eq!(run_in("moments", &config, &c, &["--seed", "10"]).status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("moments.csv")).unwrap(), std::fs::read(c.join("moments.csv")).unwrap());
}

#[test]
fn constants_gate_and_override() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{ "schema": "rdslab-config/1", "system": "ab-perturbed", "seed": 2,
             "pipeline": { "m": 1, "budget": 4, "words": { "mode": "sampled", "samples": 8, "seed": 0 } } }"#,
    );
    let o = run_in("pipeline", &config, &tmp.path().join("p"), &[]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_CONFIG));
    assert!(stderr(&o).contains("override"), "{}", stderr(&o));
    let out = tmp.path().join("p2");
    let o = run_in("pipeline", &config, &out, &["--override"]);
    assert_eq!(o.status.code(), Some(rdslab_cli::EXIT_OK), "{}", stderr(&o));
    let ledger = std::fs::read_to_string(out.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with("stage,sigma_class,retained_mass,discarded_mass,K,L,atom_count\n"));
}

#[test]
fn set_overrides_reach_the_command() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), AB);
    let out = tmp.path().join("o");
    let o = run_in("orbit", &config, &out, &["--set", "orbit.x=[0.5, 0.5]"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    // (1/2, 1/2) has the orbit {(1/2,1/2), (0,1/2), (1/2,0)}.
    assert_eq!(summary["result"]["class"]["size"], 3, "{summary}");
    assert!(out.join("orbit_points.csv").exists());
}

#[test]
fn default_output_dir_is_relative_to_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{ "schema": "rdslab-config/1", "system": "ab", "output_dir": "runs", "tails": { "n_max": 10 } }"#,
    );
    let o = rdslab(&["tails", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("runs/tails/tails.csv").exists());
    assert!(tmp.path().join("runs/tails/manifest.json").exists());
}
