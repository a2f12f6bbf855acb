use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Small world shared by the tests: 5 training bags, 2 epochs.
const SMALL: [&str; 6] = ["--bags", "5", "--test-bags", "3", "--epochs", "2"];

#[test]
fn two_epochs_on_five_bags_give_two_log_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let mut args = vec!["generate", "--out", p(&data_dir)];
    args.extend(SMALL);
    ok(&cmil(&args));
    let data = data_dir.join("train.jsonl");
    assert!(data.exists() && data_dir.join("test.jsonl").exists());

    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&run), "--checkpoint-every", "1"];
    args.extend(SMALL);
    ok(&cmil(&args));
    assert_eq!(csv_rows(&run.join("log.csv")).len(), 2);
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("checkpoints/epoch-0001.ckpt").exists());
    assert!(run.join("checkpoints/epoch-0002.ckpt").exists());
    assert!(run.join("config.toml").exists());
}

#[test]
fn eval_on_training_set_matches_final_log_row() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    ok(&cmil(&["generate", "--out", p(&data_dir), "--bags", "12", "--format", "bin"]));
    let data = data_dir.join("train.bin");
    let run = dir.path().join("run");
    ok(&cmil(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "3", "--nms", "0.4"]));
    let eval_dir = dir.path().join("eval");
    ok(&cmil(&[
        "eval",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--data",
        p(&data),
        "--out",
        p(&eval_dir),
        "--nms",
        "0.4",
    ]));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let rows = csv_rows(&run.join("log.csv"));
    let last = rows.last().unwrap();
    // columns: epoch,lambda,lr,mean_loss,mean_selection,mean_detector,accuracy,corloc,map,...
    let corloc: f64 = last[7].parse().unwrap();
    let map: f64 = last[8].parse().unwrap();
    assert_eq!(metrics["mean_corloc"].as_f64().unwrap(), corloc);
    assert_eq!(metrics["map"].as_f64().unwrap(), map);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&cmil(&[
        "train",
        "--out",
        p(&first),
        "--bags",
        "8",
        "--epochs",
        "3",
        "--schedule",
        "sigmoid",
        "--set",
        "synth.noise=0.25",
        "--seed",
        "5",
    ]));
    let second = dir.path().join("second");
    ok(&cmil(&["train", "--config", p(&first.join("config.toml")), "--out", p(&second)]));
    for file in ["log.csv", "steps.csv", "model.ckpt"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file}"
        );
    }
    let echoed = fs::read_to_string(first.join("config.toml")).unwrap();
    assert!(echoed.contains("kind = \"sigmoid\""), "{echoed}");
    assert!(echoed.contains("noise = 0.25"), "{echoed}");
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmil(&["train", "--out", p(dir.path()), "--set", "train.epochz=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let out = cmil(&["train", "--out", p(dir.path()), "--schedule", "cubic"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr = \"fast\"\n").unwrap();
    let out = cmil(&["train", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn runtime_errors_exit_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let out = cmil(&["train", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));

    let corrupt = dir.path().join("corrupt.bin");
    fs::write(&corrupt, b"CMILDATA\x01\x00").unwrap();
    let out = cmil(&["train", "--data", p(&corrupt), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn sweep_writes_raw_rows_aggregates_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--out", p(dir.path()), "--seeds", "0..2"];
    args.extend(SMALL);
    ok(&cmil(&args));
    assert_eq!(csv_rows(&dir.path().join("trials.csv")).len(), 6 * 2);
    assert_eq!(csv_rows(&dir.path().join("summary.csv")).len(), 6);
    assert_eq!(csv_rows(&dir.path().join("schedules.csv")).len(), 2);
    assert!(dir.path().join("log/seed-1/log.csv").exists());
    assert!(dir.path().join("mil/seed-0/subsets.csv").exists());
}

#[test]
fn ablate_writes_four_cells_and_check_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--out", p(dir.path()), "--seeds", "0", "--check"];
    args.extend(SMALL);
    let out = cmil(&args);
    let rows = csv_rows(&dir.path().join("summary.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["both", "selector-only", "detector-only", "neither"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let code = out.status.code();
    if stdout.contains("check: PASS") {
        assert_eq!(code, Some(0));
    } else {
        assert!(stdout.contains("check: FAIL"), "{stdout}");
        assert_eq!(code, Some(3));
    }
}

#[test]
fn gradcheck_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmil(&["gradcheck", "--out", p(dir.path()), "--set", "gradcheck.bags=4"]);
    ok(&out);
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
}
