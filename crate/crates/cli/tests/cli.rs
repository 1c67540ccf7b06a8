use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use gazeseq::model::{read_weights, GazeModel};
use gazeseq::preprocess::read_gzds;

const BIN: &str = env!("CARGO_BIN_EXE_gazeseq");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_dataset(dir: &Path) {
    ok(&["gen", "--scenario", "s1", "--participants", "3", "--seed", "5", "--out", "tr"], dir);
    ok(&["preprocess", "--traces", "tr", "--scenario", "s1", "--kfold", "3", "--seed", "5", "--stride", "10", "--out", "d.gzds"], dir);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--arch", "warp", "--dataset", "x", "--out", "y"],
        vec!["train", "--arch", "lstm"],
        vec!["frobnicate"],
        vec!["stream", "--weights", "w", "--scenario-meta", "s1", "--policy", "random"],
    ] {
        assert_eq!(run(&args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--arch", "lstm", "--dataset", "missing.gzds", "--out", "w.gzwt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    fs::write(dir.path().join("bad.json"), "{\"id\": 3}").unwrap();
    assert_eq!(run(&["scenario", "validate", "bad.json"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["scenario", "validate", "nope"], dir.path()).status.code(), Some(1));
}

#[test]
fn builtin_scenarios_validate_and_rasterize() {
    let dir = tempfile::tempdir().unwrap();
    for (id, frames) in [("s1", 2400), ("s2", 1200)] {
        ok(&["scenario", "validate", id], dir.path());
        ok(&["scenario", "rasterize", id, "--out", "m.csv"], dir.path());
        let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 25);
        assert_eq!(csv.lines().count(), 1 + frames);
    }
}

#[test]
fn gen_writes_one_file_per_participant_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--scenario", "s2", "--participants", "4", "--seed", "9", "--out", "a"], dir.path());
    ok(&["gen", "--scenario", "s2", "--participants", "4", "--seed", "9", "--out", "b"], dir.path());
    let mut names: Vec<String> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["personas.json", "trace_p000.csv", "trace_p001.csv", "trace_p002.csv", "trace_p003.csv"]);
    for n in &names {
        assert_eq!(fs::read(dir.path().join("a").join(n)).unwrap(), fs::read(dir.path().join("b").join(n)).unwrap(), "{n}");
    }
    let personas: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/personas.json")).unwrap()).unwrap();
    assert_eq!(personas["participants"].as_array().unwrap().len(), 4);
    assert_eq!(personas["provenance"]["seed"], 9);
}

#[test]
fn preprocess_train_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let ds = read_gzds(&fs::read(d.join("d.gzds")).unwrap()).unwrap();
    assert_eq!(ds.n_classes, 6);
    assert_eq!(ds.len(), 3 * ((2400 - 30) / 10 + 1));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(d.join("d.gzds.json")).unwrap()).unwrap();
    assert_eq!(meta["scenario"], "s1");
    assert_eq!(meta["n_samples"], ds.len());

    ok(&["train", "--arch", "lstm", "--dataset", "d.gzds", "--out", "w.gzwt", "--max-epochs", "2", "--patience", "1", "--exclude-fold", "0"], d);
    let model = read_weights(&fs::read(d.join("w.gzwt")).unwrap()).unwrap();
    assert_eq!(model.param_count(), 41_702);

    let mut child = Command::new(BIN)
        .args(["stream", "--weights", "w.gzwt", "--scenario-meta", "s1", "--trace-out", "cmds.csv"])
        .current_dir(d)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"EVT 0.0 p1 standing-speaking 30 on\nTICK 0.0\nTICK 0.0\nnonsense\nTICK 0.1\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("GAZE 0.0 "));
    assert!(lines[1].starts_with("ERR "));
    assert!(lines[2].starts_with("ERR "));
    assert!(lines[3].starts_with("GAZE 0.1 "));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ticks 2"));

    ok(&["export-plot", "--commands", "cmds.csv", "--out", "plot.csv"], d);
    let plot = fs::read_to_string(d.join("plot.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some("t_s,yaw_deg,class"));
    assert_eq!(plot.lines().count(), 3);
    ok(&["export-plot", "--traces", "tr", "--out", "pop.csv"], d);
    assert_eq!(fs::read_to_string(d.join("pop.csv")).unwrap().lines().count(), 1 + 2400);
}

#[test]
fn kfold_writes_report_and_fold_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(&["kfold", "--arch", "lstm", "--dataset", "d.gzds", "--report", "r.json", "--k", "3", "--max-epochs", "2", "--patience", "1", "--weights-dir", "w"], d);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "s1");
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    assert_eq!(report["provenance"]["inputs"][0]["name"], "d.gzds");
    for i in 0..3 {
        assert!(d.join(format!("w/fold_{i:02}.gzwt")).exists());
    }
    let out = run(&["kfold", "--arch", "lstm", "--dataset", "d.gzds", "--report", "r.json", "--k", "2"], d);
    assert_eq!(out.status.code(), Some(1), "dataset split into 3 folds cannot run with k = 2");
}
