use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbm-evolve"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn run_small(dir: &Path, extra: &[&str]) {
    let run_dir = dir.to_str().unwrap();
    let mut args = vec!["run", "--run-dir", run_dir, "--world.params.n_classes=4", "--world.params.seed=3"];
    args.extend_from_slice(extra);
    assert_ok(&cli(&args));
}

#[test]
fn export_report_after_acceptance_run_has_monotone_best_column() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let r = run_dir.to_str().unwrap();
    assert_ok(&cli(&["run", "--run-dir", r, "--world.params.seed=17", "--T=15", "--K=10", "--k=3"]));
    assert_ok(&cli(&["export-report", "--run-dir", r]));

    let mut reader = csv::Reader::from_path(run_dir.join("report/iterations.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let best_col = headers.iter().position(|h| h == "best_accuracy").unwrap();
    let best: Vec<f64> = reader.records().map(|rec| rec.unwrap()[best_col].parse().unwrap()).collect();
    assert_eq!(best.len(), 15);
    assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
    assert!(run_dir.join("report/confusion/iter_014.json").exists());
    assert!(run_dir.join("report/concepts_added.csv").exists());
}

#[test]
fn eval_prints_a_single_accuracy_line() {
    let tmp = tempfile::tempdir().unwrap();
    run_small(tmp.path(), &["--T=2", "--K=2"]);
    let out = cli(&["eval", "--run-dir", tmp.path().to_str().unwrap()]);
    assert_ok(&out);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1, "{text}");
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn eval_zero_shot_over_cached_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    run_small(&run_dir, &["--T=1", "--K=1"]);
    let config = run_dir.join("config.json");
    let scores = run_dir.join("scores.bin");
    let library = run_dir.join("library_init.json");
    let out = cli(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--library",
        library.to_str().unwrap(),
        "--scores",
        scores.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["weights"], "zero_shot");
    assert!(v["accuracy"].as_f64().is_some());
}

#[test]
fn inspect_pair_reports_empty_history_for_unevolved_pair() {
    let tmp = tempfile::tempdir().unwrap();
    run_small(tmp.path(), &["--T=1", "--K=1"]);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("iter_000/record.json")).unwrap()).unwrap();
    let sampled = &record["sampled_pairs"][0];
    let evolved = (sampled["i"].as_u64().unwrap(), sampled["j"].as_u64().unwrap());
    let other = [(0, 1), (2, 3)].into_iter().find(|&p| p != evolved).unwrap();

    let dir = tmp.path().to_str().unwrap();
    let out = cli(&["inspect-pair", "--run-dir", dir, &other.0.to_string(), &other.1.to_string()]);
    assert_ok(&out);
    assert!(stdout(&out).contains("no history"), "{}", stdout(&out));

    let out = cli(&["inspect-pair", "--run-dir", dir, &evolved.1.to_string(), &evolved.0.to_string()]);
    assert_ok(&out);
    assert!(stdout(&out).contains("1 rounds"), "{}", stdout(&out));
}

#[test]
fn resume_extends_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    run_small(tmp.path(), &["--T=2", "--K=2"]);
    let out = cli(&["resume", "--run-dir", tmp.path().to_str().unwrap(), "--T=4"]);
    assert_ok(&out);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["iterations"], 4);
    assert!(tmp.path().join("iter_003/record.json").exists());
}

#[test]
fn simulate_then_init_from_the_world() {
    let tmp = tempfile::tempdir().unwrap();
    let world = tmp.path().join("world.json");
    let lib = tmp.path().join("lib.json");
    assert_ok(&cli(&["simulate", "--out", world.to_str().unwrap(), "--world.params.n_classes=5"]));
    let world_override = format!("--world.path={}", world.display());
    assert_ok(&cli(&["init", "--out", lib.to_str().unwrap(), &world_override]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&lib).unwrap()).unwrap();
    assert_eq!(v["classes"].as_object().unwrap().len(), 5);
}

#[test]
fn failures_print_a_machine_readable_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = cli(&["run", "--run-dir", dir, "--world.params.seed=1", "--heuristic=labeled_confusion"]);
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "label_access");

    let out = cli(&["run", "--run-dir", dir, "--T=0"]);
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("iterations"));
}
