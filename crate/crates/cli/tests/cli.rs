use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn structprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structprop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = structprop(args);
    assert!(
        out.status.success(),
        "structprop {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn accuracy(dir: &Path) -> f64 {
    report(dir)["accuracy"].as_f64().unwrap()
}

fn synth(tmp: &TempDir, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let dir = tmp.path().join(name);
    let mut args = vec!["synth", "--out", s(&dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

fn run(data: &Path, out: &Path, extra: &[&str]) -> f64 {
    let mut args = vec!["run", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
    accuracy(out)
}

fn noisy_flags() -> Vec<&'static str> {
    vec!["--lambda", "0.001", "--gamma", "10", "--sigma-image", "2", "--sigma", "att=4", "--sigma", "w2v=4"]
}

#[test]
fn separable_fixture_is_solved() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &[]);
    let acc = run(&data, &tmp.path().join("o"), &[]);
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn full_run_is_no_worse_than_the_ablation() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &["--preset", "noisy"]);
    let mut flags = noisy_flags();
    flags.extend(["--sources", "att"]);
    let full = run(&data, &tmp.path().join("full"), &flags);
    flags.extend(["--no-image-structure", "--iters", "1"]);
    let ablated = run(&data, &tmp.path().join("ablated"), &flags);
    assert!(full >= ablated, "full {full} < ablation {ablated}");
}

#[test]
fn missing_dataset_fails_cleanly() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let out_dir = tmp.path().join("o");
    let out = structprop(&["run", "--data", s(&missing), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&missing)), "stderr: {err}");
    assert!(!out_dir.exists());

    let out = structprop(&["tune", "--data", s(&missing), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn failed_run_leaves_no_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &[]);
    let out_dir = tmp.path().join("o");
    let out = structprop(&["run", "--data", s(&data), "--out", s(&out_dir), "--sigma", "nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = synth(&tmp, "a", &["--preset", "noisy", "--seed", "11"]);
    let b = synth(&tmp, "b", &["--preset", "noisy", "--seed", "11"]);
    let c = synth(&tmp, "c", &["--preset", "noisy", "--seed", "12"]);
    for file in ["features.csv", "labels.csv", "labels_true.csv", "semantic/att.csv", "semantic/w2v.csv"] {
        let read = |d: &Path| std::fs::read(d.join(file)).unwrap();
        assert_eq!(read(&a), read(&b), "{file}");
        if file == "features.csv" {
            assert_ne!(read(&a), read(&c));
        }
    }
}

#[test]
fn report_accuracy_matches_predictions() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &["--preset", "noisy"]);
    let out = tmp.path().join("o");
    let mut flags = noisy_flags();
    flags.extend(["--sources", "att"]);
    run(&data, &out, &flags);

    let truth: Vec<i64> = std::fs::read_to_string(data.join("labels_true.csv"))
        .unwrap()
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = preds.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rep = report(&out);
    assert_eq!(header.len() - 1, rep["rounds"].as_u64().unwrap() as usize);

    let mut per_round: Vec<BTreeMap<i64, (usize, usize)>> = vec![BTreeMap::new(); header.len() - 1];
    for line in lines {
        let cells: Vec<i64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let t = truth[cells[0] as usize];
        for (r, &p) in cells[1..].iter().enumerate() {
            let e = per_round[r].entry(t).or_default();
            e.0 += usize::from(p == t);
            e.1 += 1;
        }
    }
    let mean = |m: &BTreeMap<i64, (usize, usize)>| {
        m.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / m.len() as f64
    };
    let trace: Vec<f64> = rep["accuracy_trace"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (r, m) in per_round.iter().enumerate() {
        assert!((mean(m) - trace[r]).abs() < 1e-12);
    }
    assert!((mean(per_round.last().unwrap()) - rep["accuracy"].as_f64().unwrap()).abs() < 1e-12);
    let per_class = rep["per_class"].as_array().unwrap();
    assert_eq!(per_class.len(), 4);
}

#[test]
fn fusion_through_the_cli() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &["--preset", "noisy"]);
    let acc = |sources: &str| {
        let mut flags = noisy_flags();
        flags.extend(["--sources", sources]);
        run(&data, &tmp.path().join(sources.replace(',', "_")), &flags)
    };
    let (att, w2v, both) = (acc("att"), acc("w2v"), acc("att,w2v"));
    assert!(both >= att.max(w2v) - 0.02, "att {att}, w2v {w2v}, fused {both}");
}

#[test]
fn tune_resume_and_run_with_chosen_params() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &[]);
    let tune_dir = tmp.path().join("t");
    let grid = [
        "--lambda-exps", "-10,-8", "--gamma-exps", "-12", "--sigma-exps", "0", "--workers", "1",
    ];
    let mut args = vec!["tune", "--data", s(&data), "--out", s(&tune_dir)];
    args.extend_from_slice(&grid);
    ok(&args);
    let table = std::fs::read_to_string(tune_dir.join("tune.csv")).unwrap();
    // header plus two pairs times two folds in stage one, then the sigma stage
    assert!(table.lines().count() >= 5, "{table}");

    let chosen: Value = serde_json::from_str(&std::fs::read_to_string(tune_dir.join("params.json")).unwrap()).unwrap();
    let lambda = chosen["hyperparams"]["lambda"].as_f64().unwrap();
    assert!(lambda == 2f64.powi(-10) || lambda == 2f64.powi(-8));
    assert_eq!(chosen["hyperparams"]["gamma"].as_f64().unwrap(), 2f64.powi(-12));
    assert_eq!(chosen["config"]["resumed_rows"].as_u64(), Some(0));

    ok(&args);
    let again: Value = serde_json::from_str(&std::fs::read_to_string(tune_dir.join("params.json")).unwrap()).unwrap();
    assert_eq!(again["hyperparams"], chosen["hyperparams"]);
    assert_eq!(again["config"]["resumed_rows"].as_u64().unwrap() as usize, table.lines().count() - 1);
    assert_eq!(std::fs::read_to_string(tune_dir.join("tune.csv")).unwrap(), table);

    let out = tmp.path().join("o");
    let params = tune_dir.join("params.json");
    run(&data, &out, &["--params", s(&params)]);
    let rep = report(&out);
    assert_eq!(rep["config"]["hyperparams"]["lambda"].as_f64().unwrap(), lambda);
    assert!(rep["accuracy"].as_f64().unwrap() >= 0.9);
}

#[test]
fn dump_graphs_and_trace() {
    let tmp = TempDir::new().unwrap();
    let data = synth(&tmp, "d", &[]);
    let out_dir = tmp.path().join("o");
    let out = structprop(&["run", "--data", s(&data), "--out", s(&out_dir), "--dump-graphs", "--trace"]);
    assert!(out.status.success());
    assert!(out_dir.join("graphs/image.csv").is_file());
    assert!(out_dir.join("graphs/att.csv").is_file());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("1,")), "{err}");
}
