use std::path::Path;
use std::process::{Command, Output};

use lsa_core::ExperimentConfig;

const TINY: &str = r#"
master_seed = 3
workers = 1

[corpus]
members = 4
dev_nonmembers = 4
eval_nonmembers = 4
clip_len = 256

[denoiser]
hidden = [16]

[train]
steps = 100

[reverse.stride]
max_calls = 4

[attack]
steps = 3
restarts = 1
bisection_steps = 5

[calibration]
directions = 2

[evaluation]
bootstrap_resamples = 100
"#;

fn lsa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsa-probe"))
        .current_dir(dir)
        .env_remove("LSAP_RUN_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn show_config_prints_defaults_and_applies_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lsa(tmp.path(), &["show-config"]);
    assert!(o.status.success());
    let shown = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(shown, ExperimentConfig::default());

    let metric = ["attack.metric=\"log-mel-mse\"", "calibration.metric=\"log-mel-mse\""];
    let o = lsa(tmp.path(), &["show-config", "--set", "attack.steps=8", "--set", metric[0], "--set", metric[1]]);
    assert!(o.status.success(), "{}", stderr(&o));
    let shown = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(shown.attack.steps, 8);
    assert_eq!(shown.attack.metric, lsa_core::MetricKind::LogMelMse);
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["show-config", "--set", "attack.no_such_field=1"],
        vec!["show-config", "--set", "attack.steps"],
        vec!["show-config", "--config", "missing.toml"],
        vec!["show-config", "--set", "attack.eta_max=-1"],
        vec!["show-config", "--set", "attack.metric=\"waveform-mse\""],
    ] {
        let o = lsa(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_artifacts_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lsa(tmp.path(), &["train", "--run-dir", "r"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
}

#[test]
fn evaluate_on_empty_score_file_reports_no_records() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("r/scores");
    std::fs::create_dir_all(&scores).unwrap();
    std::fs::write(scores.join("lsa-probe.jsonl"), "").unwrap();
    let o = lsa(tmp.path(), &["evaluate", "--run-dir", "r"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
}

#[test]
fn run_dir_defaults_to_the_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_lsa-probe"))
        .current_dir(tmp.path())
        .env("LSAP_RUN_DIR", tmp.path().join("from-env"))
        .args(["--config", &cfg, "gen-data"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("from-env/corpus/manifest.json").exists());
}

#[test]
fn full_run_then_numerical_failure_on_a_zero_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = lsa(tmp.path(), &["--config", &cfg, "--run-dir", "r", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("lsa-probe") && report.contains("secmi"));
    for f in ["reports/report.txt", "reports/evaluation.json", "scores/lsa-probe.jsonl", "scores/parity.json"] {
        assert!(tmp.path().join("r").join(f).exists(), "{f}");
    }

    // A zero reference budget calibrates τ = 0, which the attack refuses.
    let zero = ["--config", &cfg, "--run-dir", "r", "--set", "calibration.eta_ref=0.0"];
    assert!(lsa(tmp.path(), &[&zero[..], &["calibrate"]].concat()).status.success());
    let o = lsa(tmp.path(), &[&zero[..], &["attack"]].concat());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
