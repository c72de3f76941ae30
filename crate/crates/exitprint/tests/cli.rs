mod common;

use std::path::Path;
use std::process::Command;

use common::tiny_config;

fn exe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_exitprint"));
    c.env_remove(exitprint::config::OUT_ENV);
    c
}

fn write_config(dir: &Path, name: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, tiny_config(name).to_toml().unwrap()).unwrap();
    path
}

fn ok(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stepwise_commands_produce_a_verification_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "steps");
    let out = tmp.path().join("art");
    let base = |args: &[&str]| {
        let mut c = exe();
        c.arg("--config").arg(&cfg).arg("--out").arg(&out).args(args);
        c
    };
    ok(&mut base(&["train", "--id", "target"]));
    let backbone = out.join("target.backbone.emx");
    assert!(out.join("target.log").exists());
    let model = out.join("target.emx");
    ok(&mut base(&["to-multiexit", "--model", backbone.to_str().unwrap(), "--output", model.to_str().unwrap()]));
    let cal = ok(&mut base(&["calibrate", "--model", model.to_str().unwrap(), "--rad", "0.05"]));
    assert!(cal.starts_with("T_c "));
    let manifest = ok(&mut base(&["fingerprint", "--model", model.to_str().unwrap()]));
    assert!(manifest.contains("N: 4"));
    let attacked = ok(&mut base(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--step",
        r#"{"kind":"quantize","bits":8,"seed":3}"#,
    ]));
    assert!(attacked.trim().ends_with("quant-b8-s3.emx"));
    let report = ok(&mut base(&[
        "verify",
        "--model",
        attacked.trim(),
        "--fingerprints",
        out.join("target.fps").to_str().unwrap(),
        "--t-f",
        "0.5",
    ]));
    for key in ["model_id: quant-b8-s3", "backend: cost-model", "T_N: ", "T_f: 0.500000", "verdict: ", "N: 4", "t_max: "] {
        assert!(report.contains(key), "{key} missing from {report}");
    }
    assert!(out.join("quant-b8-s3.curve").exists());
}

#[test]
fn evaluate_honours_the_output_root_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "env");
    let root = tmp.path().join("from-env");
    let summary = ok(exe().env(exitprint::config::OUT_ENV, &root).arg("--config").arg(&cfg).arg("evaluate"));
    assert!(summary.contains("== RAD 0.05 =="));
    let dir = tiny_config("env").out_dir(&root);
    assert!(dir.join("report.json").exists());
    let ablation = ok(exe()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&root)
        .args(["ablate-threshold", "--candidates", "0,0.5,1"]));
    assert!(ablation.starts_with("RAD 0.05\nT_f\tindependent_rate\tstolen_rate\n0.0000\t0.0000\t0.0000"));
    ok(exe().arg("--config").arg(&cfg).arg("--out").arg(&root).arg("report"));
}

#[test]
fn failures_exit_nonzero_with_a_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = exe()
        .arg("--out")
        .arg(tmp.path())
        .args(["verify", "--model", "missing.emx", "--fingerprints", "missing.fps", "--t-f", "0.2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[verify]"), "{err}");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "population = 1\n").unwrap();
    let out = exe().arg("--config").arg(&bad).arg("evaluate").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));
}
