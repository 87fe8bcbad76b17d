use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avdet::detector::DetectorConfig;
use avdet::pipeline::PipelineConfig;
use avdet::ssl::SslConfig;
use avdet::synthdata::DatasetConfig;

fn avdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avdet"))
        .args(args)
        .output()
        .expect("spawn avdet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        out_dir: out.to_path_buf(),
        data: DatasetConfig {
            n_train: 48,
            n_test: 12,
            ..DatasetConfig::default()
        },
        ssl: SslConfig {
            epochs: 2,
            warmup: 1,
            relabel_period: 1,
            batch: 16,
            ..SslConfig::default()
        },
        detector: DetectorConfig {
            epochs: 2,
            batch: 16,
            ..DetectorConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn config_command_prints_loadable_toml() {
    let o = avdet(&["config", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let cfg: PipelineConfig = toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 7);
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[ssl]\nlambda = 2.0\n").unwrap();
    assert_eq!(code(&avdet(&["config", "--config", p.to_str().unwrap()])), 2);
    fs::write(&p, "not_a_key = 1\n").unwrap();
    assert_eq!(code(&avdet(&["synth", "--config", p.to_str().unwrap()])), 2);
}

#[test]
fn missing_config_file_exits_with_code_3() {
    assert_eq!(code(&avdet(&["config", "--config", "/nonexistent/avdet.toml"])), 3);
}

#[test]
fn eval_without_detector_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = avdet(&["eval", "--quiet", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn staged_run_is_idempotent_and_detects_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(&out);
    let path = write_config(dir.path(), &cfg);
    for stage in ["synth", "train-ssl", "extract", "train-det", "eval"] {
        let o = avdet(&[stage, "--config", &path]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["eval/report.json", "eval/report.txt", "eval/detections.jsonl", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = fs::read(out.join("eval/report.json")).unwrap();

    let again = avdet(&["e2e", "--config", &path, "--workers", "2"]);
    assert_eq!(code(&again), 0);
    let log = String::from_utf8_lossy(&again.stderr);
    assert_eq!(log.matches("up to date").count(), 5, "{log}");
    assert_eq!(fs::read(out.join("eval/report.json")).unwrap(), report);

    let mut changed = cfg.clone();
    changed.ssl.lambda = 0.3;
    let changed_path = write_config(dir.path(), &changed);
    let o = avdet(&["extract", "--config", &changed_path]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stale"));

    let path = write_config(dir.path(), &cfg);
    let o = avdet(&["eval", "--config", &path, "--force", "--workers", "1", "--quiet"]);
    assert_eq!(code(&o), 0);
    assert!(o.stderr.is_empty());
    assert_eq!(fs::read(out.join("eval/report.json")).unwrap(), report);
}
