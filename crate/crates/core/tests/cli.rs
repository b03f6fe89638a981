use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mlang(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlang")).args(args).output().unwrap()
}

fn config_file(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({"preset": "reduced", "paths": {"root": dir.join("ws")}});
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {stderr}"))
}

#[test]
fn help_lists_commands_and_flags() {
    let out = mlang(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for word in [
        "synth-data",
        "codec-train",
        "audio-fit",
        "text-train",
        "vocab-build",
        "tasks-compile",
        "pretrain",
        "posttrain",
        "generate",
        "eval",
        "export",
        "--config",
        "--seed",
        "--override",
    ] {
        assert!(text.contains(word), "help lacks {word}");
    }
    let out = mlang(&["generate", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--text-part"));
}

#[test]
fn missing_upstream_artifact_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path());
    let out = mlang(&["pretrain", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_of(&out);
    assert_eq!(e["exit_code"], 3);
    assert!(e["artifact"].as_str().unwrap().ends_with("index.json"), "{e}");

    let out = mlang(&["generate", "--config", &cfg, "--mode", "audio2motion", "--audio", "x.wav", "--output", "o.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path());
    let out = mlang(&["synth-data", "--config", &cfg, "--override", "corpus.nope=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["exit_code"], 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let out = mlang(&["synth-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = mlang(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mlang(&["tasks-compile", "midtrain", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path());
    let out = mlang(&["synth-data", "--config", &cfg, "--override", "corpus.n=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n"], 3);
    let corpus = dir.path().join("ws/data/corpus");
    let prov: Value = serde_json::from_str(&std::fs::read_to_string(corpus.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "synth-data");

    let input = corpus.join("clip_00000.json");
    let csv = dir.path().join("clip.csv");
    let out = mlang(&["export", "--input", input.to_str().unwrap(), "--output", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = mlang_core::pipeline::read_marker_csv(&csv).unwrap();
    let motion = mlang_core::motion::MotionSequence::read_json(&input).unwrap();
    assert_eq!(rows.last().unwrap().frame + 1, motion.frames());
}
