use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anteversion::cv::{self, FOLDS};

const CONFIG: &str = r#"seed = 5
run_name = "small"

[data]
metadata = "phantom/metadata.csv"
image_root = "phantom/images"

[preprocess]
side = 64

[backbone]
blocks = [{ convs = 1, width = 4 }, { convs = 1, width = 8 }]

[head]
attn_widths = [4]
dense_width = 8
dropout = 0.2

[training]
epochs = 3

[report]
plots = false

[phantom]
population = 25
side = 64
seed = 2
"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anteversion"))
        .args(args)
        .current_dir(dir)
        .env_remove("ANTEVERSION_OUTPUT_ROOT")
        .env_remove("ANTEVERSION_DEVICE")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["phantom", "--config", "run.toml", "--out", "phantom"]);
    dir
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_string()
}

#[test]
fn usage_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[usage]:"));
    assert_eq!(cli(dir.path(), &["cv", "--frobnicate"]).status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "[training]\nepochz = 1\n").unwrap();
    let out = cli(dir.path(), &["cv", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[config]:"), "{}", stderr_line(&out));
    assert_eq!(stderr_line(&out).lines().count(), 1);

    fs::write(dir.path().join("odd.toml"), "[preprocess]\nside = 100\n").unwrap();
    let out = cli(dir.path(), &["cv", "--config", "odd.toml"]);
    assert!(stderr_line(&out).starts_with("error[config]:"), "{}", stderr_line(&out));

    let out = cli(dir.path(), &["ingest-check", "--metadata", "missing.csv", "--image-root", "."]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[dataset]:"), "{}", stderr_line(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_anteversion"))
        .args(["ingest-check"])
        .current_dir(dir.path())
        .env("ANTEVERSION_DEVICE", "gpu")
        .output()
        .unwrap();
    assert!(stderr_line(&out).starts_with("error[device]:"));
}

#[test]
fn ingest_check_prints_group_statistics() {
    let dir = setup();
    let out = ok(dir.path(), &["ingest-check", "--config", "run.toml"]);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("group,count,"));
    let all: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((all[0], all[1]), ("all", "25"));
    assert_eq!(out.lines().count(), 1 + 3 * 4);
}

#[test]
fn cv_pipeline_is_idempotent_and_resumable() {
    let dir = setup();
    ok(dir.path(), &["cv", "--config", "run.toml"]);
    let run = dir.path().join("runs/small");
    for f in ["config.resolved", "foldplan.json", "report/fold_table.csv", "report/samples.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let rows: usize = (0..FOLDS).map(|e| cv::read_predictions(&cv::predictions_path(&run, e)).unwrap().len()).sum();
    assert_eq!(rows, 25);
    for e in 0..FOLDS {
        for f in ["bundle.tar", "history.jsonl"] {
            assert!(cv::fold_dir(&run, e).join(f).is_file());
        }
    }

    // complete run: nothing is touched
    let stamp = fs::metadata(run.join("fold_0/bundle.tar")).unwrap().modified().unwrap();
    let out = cli(dir.path(), &["cv", "--config", "run.toml"]);
    assert!(out.status.success());
    assert!(stderr_line(&out).contains("nothing to do"));
    assert_eq!(fs::metadata(run.join("fold_0/bundle.tar")).unwrap().modified().unwrap(), stamp);

    // a lost prediction file is recomputed from its bundle, identically
    let before = fs::read(cv::predictions_path(&run, 2)).unwrap();
    fs::remove_file(cv::predictions_path(&run, 2)).unwrap();
    ok(dir.path(), &["evaluate", "--run-dir", "runs/small"]);
    assert_eq!(fs::read(cv::predictions_path(&run, 2)).unwrap(), before);

    // report is a no-op until forced
    let report = fs::read(run.join("report/fold_table.csv")).unwrap();
    assert!(stderr_line(&cli(dir.path(), &["report", "--run-dir", "runs/small"])).contains("nothing to do"));
    ok(dir.path(), &["report", "--run-dir", "runs/small", "--force"]);
    assert_eq!(fs::read(run.join("report/fold_table.csv")).unwrap(), report);

    // a changed configuration must not silently reuse the directory
    let out = cli(dir.path(), &["cv", "--config", "run.toml", "--seed", "6"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[config]:"));
    ok(dir.path(), &["cv", "--config", "run.toml", "--seed", "6", "--force"]);
    assert!(fs::read_to_string(run.join("config.resolved")).unwrap().contains("seed = 6"));

    // an interrupted run resumes with the fold that is missing
    fs::remove_dir_all(cv::fold_dir(&run, 4)).unwrap();
    fs::remove_dir_all(run.join("report")).unwrap();
    let kept = fs::read(cv::predictions_path(&run, 0)).unwrap();
    ok(dir.path(), &["cv", "--config", "run.toml", "--seed", "6"]);
    assert_eq!(fs::read(cv::predictions_path(&run, 0)).unwrap(), kept);
    assert!(cv::predictions_path(&run, 4).is_file() && run.join("report/fold_table.csv").is_file());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = setup();
    ok(dir.path(), &["cv", "--config", "run.toml"]);
    let resolved = dir.path().join("runs/small/config.resolved");
    let text = fs::read_to_string(&resolved).unwrap().replace("output_root = \"runs\"", "output_root = \"again\"");
    fs::write(dir.path().join("fed_back.toml"), text).unwrap();
    ok(dir.path(), &["cv", "--config", "fed_back.toml"]);
    let (a, b) = (dir.path().join("runs/small"), dir.path().join("again/small"));
    for e in 0..FOLDS {
        assert_eq!(fs::read(cv::predictions_path(&a, e)).unwrap(), fs::read(cv::predictions_path(&b, e)).unwrap());
    }
    assert_eq!(fs::read(a.join("foldplan.json")).unwrap(), fs::read(b.join("foldplan.json")).unwrap());
    assert_eq!(fs::read(a.join("report/fold_table.csv")).unwrap(), fs::read(b.join("report/fold_table.csv")).unwrap());
}

#[test]
fn train_and_predict() {
    let dir = setup();
    let out = ok(dir.path(), &["train", "--config", "run.toml", "--experiment", "1"]);
    assert!(out.contains("test MAE"));
    let train = dir.path().join("runs/small/train");
    let rows = cv::read_predictions(&train.join("predictions.csv")).unwrap();
    assert!(!rows.is_empty() && rows.iter().all(|r| r.fold == 1));
    assert!(stderr_line(&cli(dir.path(), &["train", "--config", "run.toml", "--experiment", "1"])).contains("nothing to do"));

    let args = ["predict", "--bundle", "runs/small/train/bundle.tar", "--image", "phantom/images/P0001.png", "--age", "50", "--gender", "M"];
    let out = ok(dir.path(), &args);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let values: Vec<f64> = lines[0].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert!(values.iter().all(|v| v.is_finite()));
    assert_eq!(ok(dir.path(), &args), out);

    let out = cli(dir.path(), &["predict", "--bundle", "runs/small/train/bundle.tar", "--image", "phantom/images/P0001.png", "--age", "50", "--gender", "Q"]);
    assert!(stderr_line(&out).starts_with("error[input]:"));
    let out = cli(dir.path(), &["predict", "--bundle", "run.toml", "--image", "phantom/images/P0001.png", "--age", "50", "--gender", "F"]);
    assert!(stderr_line(&out).starts_with("error[model]:"), "{}", stderr_line(&out));
}

#[test]
fn phantom_refuses_to_overwrite_different_parameters() {
    let dir = setup();
    let out = cli(dir.path(), &["phantom", "--config", "run.toml", "--out", "phantom", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(1));
    let before = fs::read(dir.path().join("phantom/metadata.csv")).unwrap();
    ok(dir.path(), &["phantom", "--config", "run.toml", "--out", "phantom", "--seed", "9", "--force"]);
    assert_ne!(fs::read(dir.path().join("phantom/metadata.csv")).unwrap(), before);
}
